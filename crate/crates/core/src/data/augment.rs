use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::image::{bilinear_resize, center_crop, crop, hflip, resize_shorter_side, shear_zoom};
use super::{DataError, ImageRecord};
use crate::tensor::Tensor;

/// Ratio between the resize and crop extents of the reference pipelines
/// (256 → 224).
const RESIZE_RATIO: f64 = 256.0 / 224.0;

/// Named augmentation pipelines. Randomness is a pure function of
/// `(record id, epoch, seed)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Pipeline {
    Identity,
    /// Plain bilinear resize to `size×size`.
    Resize {
        size: usize,
    },
    /// Random shear angle in `[-shear, shear]` radians and zoom in
    /// `[1-zoom, 1+zoom]`, then resize to `size`.
    PbcTrain {
        shear: f32,
        zoom: f32,
        size: usize,
    },
    /// Random horizontal flip, then resize to `size`.
    VitTrain {
        size: usize,
    },
    /// Resize the shorter side to `resize`, center crop `crop`.
    VitEval {
        resize: usize,
        crop: usize,
    },
    /// Resize the shorter side to `resize`, random crop `crop`, random flip.
    CnnTrain {
        resize: usize,
        crop: usize,
    },
}

impl Pipeline {
    pub fn pbc_train(size: usize) -> Self {
        Pipeline::PbcTrain {
            shear: 0.3,
            zoom: 0.3,
            size,
        }
    }

    pub fn vit_train(size: usize) -> Self {
        Pipeline::VitTrain { size }
    }

    pub fn vit_eval(size: usize) -> Self {
        Pipeline::VitEval {
            resize: (size as f64 * RESIZE_RATIO).round() as usize,
            crop: size,
        }
    }

    pub fn cnn_train(size: usize) -> Self {
        Pipeline::CnnTrain {
            resize: (size as f64 * RESIZE_RATIO).round() as usize,
            crop: size,
        }
    }

    /// Side length of the produced images; `None` when it follows the input.
    pub fn output_size(&self) -> Option<usize> {
        match *self {
            Pipeline::Identity => None,
            Pipeline::Resize { size }
            | Pipeline::PbcTrain { size, .. }
            | Pipeline::VitTrain { size } => Some(size),
            Pipeline::VitEval { crop, .. } | Pipeline::CnnTrain { crop, .. } => Some(crop),
        }
    }

    /// Looks up a pipeline by name for a given model input size.
    pub fn by_name(name: &str, size: usize) -> Option<Self> {
        Some(match name {
            "identity" => Pipeline::Identity,
            "resize" => Pipeline::Resize { size },
            "pbc-train" => Self::pbc_train(size),
            "wbcatt-vit-train" => Self::vit_train(size),
            "wbcatt-vit-eval" => Self::vit_eval(size),
            "wbcatt-cnn-train" => Self::cnn_train(size),
            _ => return None,
        })
    }
}

fn stream_seed(id: &str, epoch: u64, seed: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(id.as_bytes());
    hasher.update(epoch.to_le_bytes());
    hasher.update(seed.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Applies `pipeline` to raw pixels. Output values stay in `[0, 1]`.
pub fn augment_pixels(
    pixels: &Tensor,
    id: &str,
    pipeline: &Pipeline,
    epoch: u64,
    seed: u64,
) -> Result<Tensor, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(id, epoch, seed));
    let fit = |img: Tensor, size: usize| bilinear_resize(&img, size, size);
    match pipeline {
        Pipeline::Identity => Ok(pixels.clone()),
        Pipeline::Resize { size } => Ok(fit(pixels.clone(), *size)),
        Pipeline::PbcTrain { shear, zoom, size } => {
            let angle = if *shear > 0.0 {
                rng.random_range(-shear..=*shear)
            } else {
                0.0
            };
            let scale = if *zoom > 0.0 {
                rng.random_range(1.0 - zoom..=1.0 + zoom)
            } else {
                1.0
            };
            Ok(fit(shear_zoom(pixels, angle, scale), *size))
        }
        Pipeline::VitTrain { size } => {
            let img = if rng.random_bool(0.5) {
                hflip(pixels)
            } else {
                pixels.clone()
            };
            Ok(fit(img, *size))
        }
        Pipeline::VitEval { resize, crop: size } => {
            if size > resize {
                return Err(DataError::Augment(format!(
                    "crop {size} larger than resize {resize}"
                )));
            }
            center_crop(&resize_shorter_side(pixels, *resize), *size, *size)
        }
        Pipeline::CnnTrain { resize, crop: size } => {
            if size > resize {
                return Err(DataError::Augment(format!(
                    "crop {size} larger than resize {resize}"
                )));
            }
            let img = resize_shorter_side(pixels, *resize);
            let (h, w) = (img.shape()[1], img.shape()[2]);
            let top = rng.random_range(0..=h - size);
            let left = rng.random_range(0..=w - size);
            let img = crop(&img, top, left, *size, *size)?;
            Ok(if rng.random_bool(0.5) {
                hflip(&img)
            } else {
                img
            })
        }
    }
}

/// Augments a record's pixels; labels and metadata pass through untouched.
pub fn augment(
    record: &ImageRecord,
    pipeline: &Pipeline,
    epoch: u64,
    seed: u64,
) -> Result<ImageRecord, DataError> {
    let pixels = augment_pixels(&record.pixels, &record.id, pipeline, epoch, seed)?;
    Ok(ImageRecord {
        pixels,
        ..record.clone()
    })
}
