//! The seven architecture families at a configurable "mini" scale.
//!
//! Every family keeps its structural rules (block pattern, pooling kind,
//! activation placement, dropout, shortcut handling) and scales layer widths
//! by a multiplier. Full-scale base widths per family:
//!
//! | family    | schedule (base widths)                                                        |
//! |-----------|-------------------------------------------------------------------------------|
//! | fc3       | dense 64 ×3, tanh, dropout 0.5                                                |
//! | cnn2      | conv5 64, pool2/2, LRN, conv5 256, pool2/2, LRN, dense 384, dense 192         |
//! | alexnet   | conv11/4 96, pool3/2, LRN, conv5 256, pool3/2, LRN, conv3 384·384·256, pool3/2, dense 4096 ×2 |
//! | vgg       | conv3 blocks 64×2, 128×2, 256×3, 512×3, 512×3 with pool3/2, relu dense 4096 ×2 |
//! | inception | stem conv3/2 32, conv3 32, conv3 64, pool3/2; 2 mixed blocks (64 / 48→64 / 64→96→96 / pool→32); GAP, dropout 0.6 |
//! | resnet    | conv3 32 + BN; 3 stages × 4 residual blocks at 32/64/128; GAP                   |
//! | lstm      | two LSTM layers of 500 over image rows, dropout 0.5                           |
//!
//! Every network ends in a 4-unit dense layer and a softmax.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::network::SpecBuilder;
use crate::tensor::{Init, LayerSpec, NetworkSpec, Padding, TensorError};

pub const WEIGHT_DECAY: f64 = 0.001;
pub const NUM_ACTIONS: usize = 4;

#[derive(Debug, Error)]
pub enum ZooError {
    #[error("layer `{layer}` has zero width at multiplier {multiplier}")]
    ZeroWidth { layer: String, multiplier: f64 },
    #[error("unknown {kind} `{value}`")]
    Unknown { kind: &'static str, value: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Fc3,
    Cnn2,
    Alexnet,
    Vgg,
    Inception,
    Resnet,
    Lstm,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::Fc3,
        Family::Cnn2,
        Family::Alexnet,
        Family::Vgg,
        Family::Inception,
        Family::Resnet,
        Family::Lstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Fc3 => "fc3",
            Family::Cnn2 => "cnn2",
            Family::Alexnet => "alexnet",
            Family::Vgg => "vgg",
            Family::Inception => "inception",
            Family::Resnet => "resnet",
            Family::Lstm => "lstm",
        }
    }

    /// Desk-scale width multiplier.
    pub fn default_multiplier(self) -> f64 {
        match self {
            Family::Fc3 => 1.0,
            Family::Cnn2 => 0.125,
            _ => 0.25,
        }
    }

    pub fn is_convolutional(self) -> bool {
        !matches!(self, Family::Fc3 | Family::Lstm)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = ZooError;

    fn from_str(s: &str) -> Result<Self, ZooError> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| ZooError::Unknown {
                kind: "family",
                value: s.into(),
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputClass {
    Gray,
    Color,
    Framestack,
}

impl InputClass {
    pub const ALL: [InputClass; 3] = [InputClass::Gray, InputClass::Color, InputClass::Framestack];

    pub fn channels(self) -> usize {
        match self {
            InputClass::Gray => 1,
            InputClass::Color | InputClass::Framestack => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InputClass::Gray => "gray",
            InputClass::Color => "color",
            InputClass::Framestack => "framestack",
        }
    }

    /// Numeric code used as a forest predictor.
    pub fn code(self) -> f64 {
        match self {
            InputClass::Gray => 0.0,
            InputClass::Color => 1.0,
            InputClass::Framestack => 2.0,
        }
    }
}

impl fmt::Display for InputClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InputClass {
    type Err = ZooError;

    fn from_str(s: &str) -> Result<Self, ZooError> {
        InputClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| ZooError::Unknown {
                kind: "input class",
                value: s.into(),
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureId {
    pub family: Family,
    pub width_multiplier: f64,
    pub input_class: InputClass,
}

impl ArchitectureId {
    pub fn new(family: Family, input_class: InputClass) -> Self {
        Self {
            family,
            width_multiplier: family.default_multiplier(),
            input_class,
        }
    }

    pub fn with_multiplier(mut self, m: f64) -> Self {
        self.width_multiplier = m;
        self
    }

    /// `family-input`, e.g. `cnn2-color`.
    pub fn label(&self) -> String {
        format!("{}-{}", self.family, self.input_class)
    }
}

/// Options that change initialization without changing structure.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BuildOptions {
    /// Zero the scale of the last batch norm in every residual branch.
    pub zero_init_residual: bool,
}

struct Zoo {
    b: SpecBuilder,
    m: f64,
    conv_init: Init,
    opts: BuildOptions,
    counter: usize,
}

impl Zoo {
    fn width(&self, base: usize, layer: &str) -> Result<usize, ZooError> {
        let w = (base as f64 * self.m).round() as usize;
        if w == 0 {
            Err(ZooError::ZeroWidth {
                layer: layer.into(),
                multiplier: self.m,
            })
        } else {
            Ok(w)
        }
    }

    fn name(&mut self, stem: &str) -> String {
        self.counter += 1;
        format!("{stem}{}", self.counter)
    }

    fn conv(&mut self, from: usize, base: usize, kernel: usize, stride: usize) -> Result<usize, ZooError> {
        let name = self.name("conv");
        let filters = self.width(base, &name)?;
        Ok(self.b.add(
            name,
            LayerSpec::Conv2d {
                filters,
                kernel,
                stride,
                padding: Padding::Same,
                init: self.conv_init,
                weight_decay: WEIGHT_DECAY,
            },
            &[from],
        ))
    }

    fn conv_relu(&mut self, from: usize, base: usize, kernel: usize, stride: usize) -> Result<usize, ZooError> {
        let c = self.conv(from, base, kernel, stride)?;
        let name = self.name("relu");
        Ok(self.b.add(name, LayerSpec::Relu, &[c]))
    }

    fn layer(&mut self, from: usize, stem: &str, layer: LayerSpec) -> usize {
        let name = self.name(stem);
        self.b.add(name, layer, &[from])
    }

    fn max_pool(&mut self, from: usize, window: usize) -> usize {
        self.layer(
            from,
            "maxpool",
            LayerSpec::MaxPool {
                window,
                stride: 2,
                padding: Padding::Same,
            },
        )
    }

    fn dense(&mut self, from: usize, units: usize, activation: LayerSpec, dropout: f64) -> usize {
        let d = self.layer(
            from,
            "dense",
            LayerSpec::Dense {
                units,
                init: Init::FULLY_CONNECTED,
                weight_decay: WEIGHT_DECAY,
            },
        );
        let a = self.layer(d, activation.kind_name(), activation);
        if dropout > 0.0 {
            self.layer(a, "dropout", LayerSpec::Dropout { rate: dropout })
        } else {
            a
        }
    }

    fn scaled_dense(&mut self, from: usize, base: usize, activation: LayerSpec, dropout: f64) -> Result<usize, ZooError> {
        let units = self.width(base, "dense")?;
        Ok(self.dense(from, units, activation, dropout))
    }

    fn head(mut self, from: usize) -> NetworkSpec {
        let out = self.layer(
            from,
            "logits",
            LayerSpec::Dense {
                units: NUM_ACTIONS,
                init: Init::FULLY_CONNECTED,
                weight_decay: WEIGHT_DECAY,
            },
        );
        self.b.add("softmax", LayerSpec::Softmax, &[out]);
        self.b.build()
    }
}

/// Build the spec for `arch` on frames of `height × width` (after cropping).
pub fn build(arch: &ArchitectureId, height: usize, width: usize) -> Result<NetworkSpec, ZooError> {
    build_with(arch, height, width, BuildOptions::default())
}

pub fn build_with(arch: &ArchitectureId, height: usize, width: usize, opts: BuildOptions) -> Result<NetworkSpec, ZooError> {
    if !(arch.width_multiplier > 0.0 && arch.width_multiplier.is_finite()) {
        return Err(ZooError::ZeroWidth {
            layer: "all".into(),
            multiplier: arch.width_multiplier,
        });
    }
    let input = [height, width, arch.input_class.channels()];
    let mut z = Zoo {
        b: SpecBuilder::new(arch.label(), &input),
        m: arch.width_multiplier,
        conv_init: if arch.family == Family::Resnet {
            Init::TruncatedNormalScaled
        } else {
            Init::UniformVarianceScaling
        },
        opts,
        counter: 0,
    };
    let x = SpecBuilder::INPUT;
    let last = match arch.family {
        Family::Fc3 => {
            let mut h = z.layer(x, "flatten", LayerSpec::Flatten);
            for _ in 0..3 {
                h = z.scaled_dense(h, 64, LayerSpec::Tanh, 0.5)?;
            }
            h
        }
        Family::Cnn2 => {
            let mut h = x;
            for base in [64, 256] {
                h = z.conv_relu(h, base, 5, 1)?;
                h = z.max_pool(h, 2);
                h = z.layer(h, "lrn", LayerSpec::lrn_default());
            }
            h = z.layer(h, "flatten", LayerSpec::Flatten);
            h = z.scaled_dense(h, 384, LayerSpec::Tanh, 0.5)?;
            z.scaled_dense(h, 192, LayerSpec::Tanh, 0.5)?
        }
        Family::Alexnet => {
            let mut h = z.conv_relu(x, 96, 11, 4)?;
            h = z.max_pool(h, 3);
            h = z.layer(h, "lrn", LayerSpec::lrn_default());
            h = z.conv_relu(h, 256, 5, 1)?;
            h = z.max_pool(h, 3);
            h = z.layer(h, "lrn", LayerSpec::lrn_default());
            for base in [384, 384, 256] {
                h = z.conv_relu(h, base, 3, 1)?;
            }
            h = z.max_pool(h, 3);
            h = z.layer(h, "flatten", LayerSpec::Flatten);
            h = z.scaled_dense(h, 4096, LayerSpec::Tanh, 0.5)?;
            z.scaled_dense(h, 4096, LayerSpec::Tanh, 0.5)?
        }
        Family::Vgg => {
            let mut h = x;
            for (base, reps) in [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)] {
                for _ in 0..reps {
                    h = z.conv_relu(h, base, 3, 1)?;
                }
                h = z.max_pool(h, 3);
            }
            h = z.layer(h, "flatten", LayerSpec::Flatten);
            h = z.scaled_dense(h, 4096, LayerSpec::Relu, 0.5)?;
            z.scaled_dense(h, 4096, LayerSpec::Relu, 0.5)?
        }
        Family::Inception => {
            let mut h = z.conv_relu(x, 32, 3, 2)?;
            h = z.conv_relu(h, 32, 3, 1)?;
            h = z.conv_relu(h, 64, 3, 1)?;
            h = z.max_pool(h, 3);
            for _ in 0..2 {
                h = inception_block(&mut z, h)?;
            }
            h = z.layer(h, "gap", LayerSpec::GlobalAvgPool);
            z.layer(h, "dropout", LayerSpec::Dropout { rate: 0.6 })
        }
        Family::Resnet => {
            let mut h = z.conv(x, 32, 3, 1)?;
            h = z.layer(h, "bn", LayerSpec::batch_norm());
            h = z.layer(h, "relu", LayerSpec::Relu);
            for (stage, base) in [32usize, 64, 128].into_iter().enumerate() {
                for block in 0..4 {
                    let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                    h = residual_block(&mut z, h, base, stride)?;
                }
            }
            z.layer(h, "gap", LayerSpec::GlobalAvgPool)
        }
        Family::Lstm => {
            let units = z.width(500, "lstm")?;
            let mut h = z.layer(
                x,
                "lstm",
                LayerSpec::Lstm {
                    units,
                    return_sequences: true,
                    init: Init::FULLY_CONNECTED,
                    weight_decay: WEIGHT_DECAY,
                },
            );
            h = z.layer(
                h,
                "lstm",
                LayerSpec::Lstm {
                    units,
                    return_sequences: false,
                    init: Init::FULLY_CONNECTED,
                    weight_decay: WEIGHT_DECAY,
                },
            );
            z.layer(h, "dropout", LayerSpec::Dropout { rate: 0.5 })
        }
    };
    let spec = z.head(last);
    spec.infer_shapes()?;
    Ok(spec)
}

fn inception_block(z: &mut Zoo, x: usize) -> Result<usize, ZooError> {
    let b1 = z.conv_relu(x, 64, 1, 1)?;
    let b2 = z.conv_relu(x, 48, 1, 1)?;
    let b2 = z.conv_relu(b2, 64, 5, 1)?;
    let b3 = z.conv_relu(x, 64, 1, 1)?;
    let b3 = z.conv_relu(b3, 96, 3, 1)?;
    let b3 = z.conv_relu(b3, 96, 3, 1)?;
    let b4 = z.layer(
        x,
        "avgpool",
        LayerSpec::AvgPool {
            window: 3,
            stride: 1,
            padding: Padding::Same,
        },
    );
    let b4 = z.conv_relu(b4, 32, 1, 1)?;
    let name = z.name("concat");
    Ok(z.b.add(name, LayerSpec::Concat, &[b1, b2, b3, b4]))
}

fn residual_block(z: &mut Zoo, x: usize, base: usize, stride: usize) -> Result<usize, ZooError> {
    let in_channels = *z.b.shape_of(x)?.last().unwrap();
    let out_channels = z.width(base, "residual")?;
    let mut h = z.conv(x, base, 3, stride)?;
    h = z.layer(h, "bn", LayerSpec::batch_norm());
    h = z.layer(h, "relu", LayerSpec::Relu);
    h = z.conv(h, base, 3, 1)?;
    let bn = if z.opts.zero_init_residual {
        LayerSpec::BatchNorm {
            epsilon: 1e-5,
            momentum: 0.9,
            gamma_init: Init::Zeros,
        }
    } else {
        LayerSpec::batch_norm()
    };
    h = z.layer(h, "bn", bn);
    let mut shortcut = x;
    if stride > 1 {
        shortcut = z.layer(
            shortcut,
            "avgpool",
            LayerSpec::AvgPool {
                window: 2,
                stride,
                padding: Padding::Same,
            },
        );
    }
    if in_channels != out_channels {
        let name = z.name("project");
        shortcut = z.b.add(
            name,
            LayerSpec::Conv2d {
                filters: out_channels,
                kernel: 1,
                stride: 1,
                padding: Padding::Same,
                init: z.conv_init,
                weight_decay: WEIGHT_DECAY,
            },
            &[shortcut],
        );
    }
    let name = z.name("add");
    let sum = z.b.add(name, LayerSpec::ResidualAdd, &[h, shortcut]);
    Ok(z.layer(sum, "relu", LayerSpec::Relu))
}

/// Parameter and multiply-accumulate totals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Complexity {
    pub params: usize,
    pub macs: usize,
    /// `2 × macs` of dense, convolution and recurrent layers.
    pub flops: usize,
}

/// Per-example multiply-accumulates of node `idx`.
fn node_macs(spec: &NetworkSpec, shapes: &[Vec<usize>], idx: usize) -> usize {
    let node = &spec.nodes[idx];
    let input = &shapes[node.inputs[0]];
    let output = &shapes[idx + 1];
    match &node.layer {
        LayerSpec::Dense { units, .. } => input[0] * units,
        LayerSpec::Conv2d { kernel, filters, .. } => output[0] * output[1] * kernel * kernel * input[2] * filters,
        LayerSpec::Lstm { units, .. } => {
            let (steps, dim) = if input.len() == 3 {
                (input[0], input[1] * input[2])
            } else {
                (input[0], input[1])
            };
            steps * (dim + units) * 4 * units
        }
        _ => 0,
    }
}

pub fn count_params_flops(spec: &NetworkSpec) -> Result<Complexity, ZooError> {
    let shapes = spec.infer_shapes()?;
    let params: usize = spec
        .param_shapes()?
        .iter()
        .flatten()
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    let macs: usize = (0..spec.nodes.len()).map(|i| node_macs(spec, &shapes, i)).sum();
    Ok(Complexity {
        params,
        macs,
        flops: 2 * macs,
    })
}

/// Number of hidden weight layers (dense, conv and LSTM, excluding the
/// output layer).
pub fn hidden_layer_count(spec: &NetworkSpec) -> usize {
    let weighted = spec
        .nodes
        .iter()
        .filter(|n| matches!(n.layer, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } | LayerSpec::Lstm { .. }))
        .count();
    weighted.saturating_sub(1)
}

pub fn max_conv_filters(spec: &NetworkSpec) -> usize {
    spec.nodes
        .iter()
        .filter_map(|n| match n.layer {
            LayerSpec::Conv2d { filters, .. } => Some(filters),
            _ => None,
        })
        .max()
        .unwrap_or(0)
}

/// Human-readable listing of every layer with its shapes, parameters,
/// initializer and weight decay. One line per node:
///
/// `#3 conv2 conv2d in=26x64x8 out=26x64x32 k=5 s=1 pad=same init=... wd=0.001 params=kernel:5x5x8x32,bias:32`
pub fn spec_listing(spec: &NetworkSpec) -> Result<String, ZooError> {
    let shapes = spec.infer_shapes()?;
    let dims = |s: &[usize]| s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
    let mut out = format!("network {} input={}\n", spec.name, dims(&spec.input_shape));
    for (i, node) in spec.nodes.iter().enumerate() {
        let input = &shapes[node.inputs[0]];
        let mut line = format!(
            "#{i} {} {} from={} in={} out={}",
            node.name,
            node.layer.kind_name(),
            node.inputs.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
            dims(input),
            dims(&shapes[i + 1])
        );
        match &node.layer {
            LayerSpec::Conv2d {
                kernel, stride, padding, ..
            } => line += &format!(" k={kernel} s={stride} pad={padding:?}"),
            LayerSpec::MaxPool { window, stride, padding } | LayerSpec::AvgPool { window, stride, padding } => {
                line += &format!(" k={window} s={stride} pad={padding:?}")
            }
            LayerSpec::Dropout { rate } => line += &format!(" rate={rate}"),
            LayerSpec::Lstm { units, return_sequences, .. } => {
                line += &format!(" units={units} sequences={return_sequences}")
            }
            _ => {}
        }
        let ps = spec.param_shapes_for(i, input);
        if !ps.is_empty() {
            line += &format!(" init={} wd={}", ps[0].init, ps[0].weight_decay);
            let list: Vec<String> = ps.iter().map(|p| format!("{}:{}", p.name, dims(&p.shape))).collect();
            line += &format!(" params={}", list.join(","));
        }
        out += &line;
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Network;

    #[test]
    fn dense_and_conv_param_counts() {
        let mut b = SpecBuilder::new("d", &[10]);
        b.then(
            "fc",
            LayerSpec::Dense {
                units: 4,
                init: Init::FULLY_CONNECTED,
                weight_decay: 0.0,
            },
        );
        assert_eq!(count_params_flops(&b.build()).unwrap().params, 44);

        let mut b = SpecBuilder::new("c", &[6, 6, 1]);
        b.then(
            "conv",
            LayerSpec::Conv2d {
                filters: 8,
                kernel: 3,
                stride: 1,
                padding: Padding::Valid,
                init: Init::UniformVarianceScaling,
                weight_decay: 0.0,
            },
        );
        let c = count_params_flops(&b.build()).unwrap();
        assert_eq!(c.params, 80);
        assert_eq!(c.macs, 4 * 4 * 9 * 8);
        assert_eq!(c.flops, 2 * c.macs);
    }

    #[test]
    fn fc3_full_frame_input_width() {
        let spec = build(&ArchitectureId::new(Family::Fc3, InputClass::Color), 130, 320).unwrap();
        let shapes = spec.infer_shapes().unwrap();
        assert_eq!(shapes[1], vec![124_800]);
        let dense: Vec<usize> = spec
            .nodes
            .iter()
            .filter_map(|n| match n.layer {
                LayerSpec::Dense { units, .. } => Some(units),
                _ => None,
            })
            .collect();
        assert_eq!(dense, vec![64, 64, 64, 4]);
    }

    #[test]
    fn lstm_step_width_follows_input_class() {
        for (class, dim) in [(InputClass::Gray, 64), (InputClass::Color, 192), (InputClass::Framestack, 192)] {
            let spec = build(&ArchitectureId::new(Family::Lstm, class), 26, 64).unwrap();
            let ps = spec.param_shapes().unwrap();
            assert_eq!(ps[0][0].shape[0], dim);
        }
    }

    #[test]
    fn cnn2_second_conv_has_256_filters_at_full_scale() {
        let spec = build(&ArchitectureId::new(Family::Cnn2, InputClass::Gray).with_multiplier(1.0), 26, 64).unwrap();
        let filters: Vec<usize> = spec
            .nodes
            .iter()
            .filter_map(|n| match n.layer {
                LayerSpec::Conv2d { filters, .. } => Some(filters),
                _ => None,
            })
            .collect();
        assert_eq!(filters, vec![64, 256]);
        assert!(spec
            .nodes
            .iter()
            .any(|n| matches!(n.layer, LayerSpec::MaxPool { window: 2, stride: 2, .. })));
    }

    #[test]
    fn resnet_full_scale_max_filters_is_128() {
        let spec = build(&ArchitectureId::new(Family::Resnet, InputClass::Color).with_multiplier(1.0), 26, 64).unwrap();
        assert_eq!(max_conv_filters(&spec), 128);
        assert!(!spec.nodes.iter().any(|n| matches!(n.layer, LayerSpec::Dropout { .. })));
        let convs = spec
            .nodes
            .iter()
            .filter(|n| n.name.starts_with("conv"))
            .count();
        // 1 stem conv + 12 blocks × 2 convs, plus the output layer = 26.
        assert_eq!(convs + 1, 26);
    }

    #[test]
    fn resnet_shortcut_rule() {
        let spec = build(&ArchitectureId::new(Family::Resnet, InputClass::Gray), 26, 64).unwrap();
        let shapes = spec.infer_shapes().unwrap();
        for (i, node) in spec.nodes.iter().enumerate() {
            if !matches!(node.layer, LayerSpec::ResidualAdd) {
                continue;
            }
            let shortcut = node.inputs[1];
            let producer = shortcut.checked_sub(1).map(|j| &spec.nodes[j].layer);
            // Find the block input: the relu preceding the first conv of the branch.
            let branch_out = &shapes[node.inputs[0]];
            match producer {
                Some(LayerSpec::Conv2d { kernel: 1, .. }) | Some(LayerSpec::AvgPool { stride: 2, .. }) => {
                    // mismatched block: shortcut transformed to the branch shape
                    assert_eq!(&shapes[shortcut], branch_out, "node {i}");
                }
                _ => {
                    // identity shortcut: untouched block input of equal shape
                    assert!(matches!(producer, Some(LayerSpec::Relu)), "node {i}");
                    assert_eq!(&shapes[shortcut], branch_out);
                }
            }
        }
    }

    #[test]
    fn every_family_and_class_emits_four_probabilities() {
        for family in Family::ALL {
            for class in InputClass::ALL {
                let arch = ArchitectureId::new(family, class);
                let spec = build(&arch, 13, 32).unwrap();
                assert_eq!(spec.output_shape().unwrap(), vec![4], "{}", arch.label());
                let net = Network::new(spec, 1).unwrap();
                let x = vec![0.1; 13 * 32 * class.channels()];
                let p = net.predict(&x).unwrap();
                assert_eq!(p.len(), 4);
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_width_is_config_error() {
        let arch = ArchitectureId::new(Family::Vgg, InputClass::Gray).with_multiplier(0.001);
        assert!(matches!(build(&arch, 26, 64), Err(ZooError::ZeroWidth { .. })));
    }

    #[test]
    fn names_round_trip() {
        for f in Family::ALL {
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
        }
        assert!("resnet50".parse::<Family>().is_err());
        assert_eq!("framestack".parse::<InputClass>().unwrap(), InputClass::Framestack);
    }
}
