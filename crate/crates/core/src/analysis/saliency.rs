//! Pixel-flip saliency.
//!
//! Each pixel of the network-view image (cropped, converted to the input
//! class, before instance normalization) is flipped in every channel,
//! `v ≥ 128 → 0` and `v < 128 → 255`. The image is re-normalized and
//! re-inferred, and the pixel's heat is the mean squared difference between
//! the perturbed and baseline output vectors.

use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::datapipe::examples_to_tensor;
use crate::datapipe::preprocess::instance_normalize;
use crate::frame::Frame;
use crate::tensor::{argmax, Network, Tensor};

pub fn flip(v: u8) -> u8 {
    if v >= 128 {
        0
    } else {
        255
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    /// Output-vector MSE per pixel, row-major.
    pub mse: Vec<f64>,
    /// Whether flipping the pixel changed the argmax action.
    pub changed: Vec<bool>,
    pub image_id: String,
    pub network_id: String,
}

impl Heatmap {
    pub fn altered(&self) -> usize {
        self.changed.iter().filter(|&&c| c).count()
    }

    pub fn mean_mse(&self) -> f64 {
        self.mse.iter().sum::<f64>() / self.mse.len() as f64
    }

    /// Gray image with the map scaled so its maximum is 255.
    pub fn to_frame(&self) -> Frame {
        let max = self.mse.iter().cloned().fold(0.0, f64::max);
        let data = self
            .mse
            .iter()
            .map(|&v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 })
            .collect();
        Frame {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// `y,x,mse,changed` rows.
    pub fn csv(&self) -> String {
        let mut s = String::from("y,x,mse,changed\n");
        for y in 0..self.height {
            for x in 0..self.width {
                let i = y * self.width + x;
                s += &format!("{y},{x},{},{}\n", self.mse[i], self.changed[i] as u8);
            }
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Saliency {
    pub heatmap: Heatmap,
    pub baseline: Vec<f64>,
    /// Largest baseline softmax output.
    pub confidence: f64,
}

fn tensor_of(image: &Frame) -> Result<Tensor, AnalysisError> {
    Ok(examples_to_tensor(&[instance_normalize(image)])?)
}

/// Network outputs for one network-view image.
pub fn outputs(net: &Network, image: &Frame) -> Result<Vec<f64>, AnalysisError> {
    Ok(net.infer(&tensor_of(image)?)?.into_data())
}

/// Flip every pixel of `image` in turn. Perturbed copies are inferred in
/// chunks of `chunk` images.
pub fn pixel_flip_saliency(
    net: &Network,
    image: &Frame,
    image_id: &str,
    network_id: &str,
) -> Result<Saliency, AnalysisError> {
    const CHUNK: usize = 64;
    let baseline = outputs(net, image)?;
    let base_action = argmax(&baseline);
    let width = baseline.len();
    let pixels = image.width * image.height;
    let mut mse = Vec::with_capacity(pixels);
    let mut changed = Vec::with_capacity(pixels);
    let mut start = 0;
    while start < pixels {
        let end = (start + CHUNK).min(pixels);
        let examples: Vec<_> = (start..end)
            .map(|p| {
                let mut f = image.clone();
                let c = f.channels;
                for v in &mut f.data[p * c..(p + 1) * c] {
                    *v = flip(*v);
                }
                instance_normalize(&f)
            })
            .collect();
        let out = net.infer(&examples_to_tensor(&examples)?)?;
        for row in out.data().chunks_exact(width) {
            mse.push(row.iter().zip(&baseline).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / width as f64);
            changed.push(argmax(row) != base_action);
        }
        start = end;
    }
    Ok(Saliency {
        confidence: baseline.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        baseline,
        heatmap: Heatmap {
            width: image.width,
            height: image.height,
            mse,
            changed,
            image_id: image_id.into(),
            network_id: network_id.into(),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencySummary {
    pub images: usize,
    /// Altered actions per image, averaged.
    pub mean_altered: f64,
    /// Altered actions summed over all images.
    pub total_altered: usize,
    pub mean_mse: f64,
    pub confidence_images: usize,
    pub mean_confidence: f64,
}

/// Flip every image of `images`; average the baseline confidence over
/// `confidence_images`.
pub fn saliency_batch(
    net: &Network,
    images: &[Frame],
    confidence_images: &[Frame],
    network_id: &str,
) -> Result<(Vec<Heatmap>, SaliencySummary), AnalysisError> {
    if images.is_empty() || confidence_images.is_empty() {
        return Err(AnalysisError::Input("saliency needs at least one image".into()));
    }
    let mut maps = Vec::with_capacity(images.len());
    for (k, im) in images.iter().enumerate() {
        maps.push(pixel_flip_saliency(net, im, &format!("image-{k}"), network_id)?.heatmap);
    }
    let mut conf = 0.0;
    for im in confidence_images {
        conf += outputs(net, im)?.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    }
    let total_altered: usize = maps.iter().map(Heatmap::altered).sum();
    let summary = SaliencySummary {
        images: maps.len(),
        mean_altered: total_altered as f64 / maps.len() as f64,
        total_altered,
        mean_mse: maps.iter().map(Heatmap::mean_mse).sum::<f64>() / maps.len() as f64,
        confidence_images: confidence_images.len(),
        mean_confidence: conf / confidence_images.len() as f64,
    };
    Ok((maps, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::network::SpecBuilder;
    use crate::tensor::{Init, LayerSpec};

    #[test]
    fn flip_rule() {
        assert_eq!(flip(128), 0);
        assert_eq!(flip(127), 255);
        assert_eq!(flip(0), 255);
        assert_eq!(flip(255), 0);
    }

    #[test]
    fn constant_network_has_empty_heatmap() {
        let mut b = SpecBuilder::new("stub", &[4, 5, 1]);
        b.then(
            "flatten",
            LayerSpec::Flatten,
        );
        b.then(
            "dense",
            LayerSpec::Dense {
                units: 4,
                init: Init::Zeros,
                weight_decay: 0.0,
            },
        );
        b.then("softmax", LayerSpec::Softmax);
        let mut net = Network::new(b.build(), 0).unwrap();
        net.output_bias_mut().unwrap().copy_from_slice(&[0.1, 2.0, -1.0, 0.0]);
        let img = Frame::new(5, 4, 1, (0..20).map(|v| v * 12).collect()).unwrap();
        let s = pixel_flip_saliency(&net, &img, "a", "stub").unwrap();
        assert!(s.heatmap.mse.iter().all(|&v| v == 0.0));
        assert_eq!(s.heatmap.altered(), 0);
        assert_eq!(s.heatmap.to_frame().data, vec![0; 20]);
    }
}
