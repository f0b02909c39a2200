use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::manifest::{SourceTag, Split};
use super::mask::ManipulationMask;

/// Row-major `h × w × c` image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "{} values cannot fill {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Channel-major tensor for the network.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = Tensor::zeros(c, h, w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out.data[(ch * h + y) * w + x] = self.data[(y * w + x) * c + ch];
                }
            }
        }
        out
    }

    /// Rounds every value to the nearest 8-bit level so the image survives
    /// an 8-bit round trip unchanged.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, channels, bytes.iter().map(|b| *b as f32 / 255.0).collect())
    }
}

/// An image with its manipulation mask and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub image: Image,
    pub mask: ManipulationMask,
    /// 0 = real, 1 = fake.
    pub label: u8,
    pub source_tag: SourceTag,
    pub group_id: String,
    pub split: Split,
}

impl ImageSample {
    /// Real samples carry an empty mask, fake ones a non-empty mask of the
    /// image's spatial shape.
    pub fn validate(&self) -> Result<()> {
        if (self.mask.height, self.mask.width) != (self.image.height, self.image.width) {
            return Err(Error::Dimension(format!(
                "mask {}x{} vs image {}x{}",
                self.mask.height, self.mask.width, self.image.height, self.image.width
            )));
        }
        match (self.label, self.mask.popcount()) {
            (0, 0) => Ok(()),
            (0, n) => Err(Error::Validation(format!("real sample has {n} masked pixels"))),
            (1, 0) => Err(Error::Validation("fake sample has an empty mask".into())),
            (1, _) => Ok(()),
            (l, _) => Err(Error::Validation(format!("label {l} is not 0 or 1"))),
        }
    }
}
