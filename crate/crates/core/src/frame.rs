//! 8-bit interleaved images and their PNG encoding.

use std::io::Cursor;

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame buffer of {actual} bytes does not match {width}x{height}x{channels}")]
    Size {
        width: usize,
        height: usize,
        channels: usize,
        actual: usize,
    },
    #[error("unsupported channel count {0}")]
    Channels(usize),
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
}

/// Row-major `height × width × channels` bytes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self, FrameError> {
        if data.len() != width * height * channels {
            return Err(FrameError::Size {
                width,
                height,
                channels,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Single channel `c` as its own 1-channel frame.
    pub fn channel(&self, c: usize) -> Frame {
        Frame {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().skip(c).step_by(self.channels).copied().collect(),
        }
    }

    pub fn to_png(&self) -> Result<Vec<u8>, FrameError> {
        let color = match self.channels {
            1 => ExtendedColorType::L8,
            3 => ExtendedColorType::Rgb8,
            4 => ExtendedColorType::Rgba8,
            c => return Err(FrameError::Channels(c)),
        };
        let mut out = Vec::new();
        PngEncoder::new(&mut out).write_image(&self.data, self.width as u32, self.height as u32, color)?;
        Ok(out)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self, FrameError> {
        let img = image::load(Cursor::new(bytes), ImageFormat::Png)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(match img {
            image::DynamicImage::ImageLuma8(b) => Frame::new(w, h, 1, b.into_raw())?,
            other => Frame::new(w, h, 3, other.into_rgb8().into_raw())?,
        })
    }
}
