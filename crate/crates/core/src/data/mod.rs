//! Synthetic sea/land samples, augmentation, PGM I/O and dataset manifests.

mod augment;
mod manifest;
mod pgm;
mod synth;

pub use augment::{augment, AugmentParams, MAX_SCALE, MAX_SHIFT};
pub use manifest::{write_dataset, Manifest, ManifestEntry, Split, SplitCounts};
pub use pgm::{
    decode_pgm, encode_pgm, image_from_bytes, image_to_bytes, mask_from_bytes, mask_to_bytes, read_image, read_mask,
    write_image, write_mask,
};
pub use synth::{generate_synthetic, GeneratorParams};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const SEA: u8 = 0;
pub const LAND: u8 = 1;

/// One single-channel image with its per-pixel class mask, row-major.
#[derive(Clone, PartialEq, Debug)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    /// Intensities in `[0, 1]`.
    pub image: Vec<f64>,
    /// Class ids (`0` sea, `1` land).
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn new(height: usize, width: usize, image: Vec<f64>, mask: Vec<u8>) -> Result<Self> {
        let n = height * width;
        if image.len() != n || mask.len() != n {
            return Err(Error::shape(
                "sample",
                format!(
                    "{height}x{width} sample with {} image / {} mask values",
                    image.len(),
                    mask.len()
                ),
            ));
        }
        Ok(Sample {
            height,
            width,
            image,
            mask,
        })
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if let Some(v) = self.image.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("image value {v} outside [0, 1]")));
        }
        if let Some(m) = self.mask.iter().find(|&&m| m as usize >= classes) {
            return Err(Error::invalid(format!("mask class {m} outside [0, {classes})")));
        }
        Ok(())
    }

    /// Fraction of sea pixels.
    pub fn sea_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m == SEA).count() as f64 / self.mask.len() as f64
    }
}

/// Stacks samples into an `(n, 1, h, w)` tensor and a flat NHW label vector.
pub fn to_batch<T: Scalar>(samples: &[&Sample]) -> Result<(Tensor<T>, Vec<usize>)> {
    let first = samples.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(samples.len() * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.height != h || s.width != w {
            return Err(Error::shape(
                "batch",
                format!("{}x{} sample in a {h}x{w} batch", s.height, s.width),
            ));
        }
        data.extend(s.image.iter().map(|&v| T::lit(v)));
        labels.extend(s.mask.iter().map(|&m| m as usize));
    }
    Ok((Tensor::from_vec(Shape::new(samples.len(), 1, h, w), data)?, labels))
}
