//! Dataset ingestion and preparation: label codecs, manifest CSV, image
//! preprocessing, augmentation, splits and a synthetic cell renderer.

mod augment;
mod image;
mod manifest;
mod schema;
mod split;
mod synth;

pub use self::image::{
    bilinear_resize, center_crop, crop, decode_image, encode_png, hflip, resize_normalize,
    resize_shorter_side, shear_zoom,
};
pub use augment::{augment, augment_pixels, Pipeline};
pub(crate) use manifest::relative_to;
pub use manifest::{load_manifest, write_manifest, MANIFEST_HEADER};
pub use schema::{
    build_codec, one_hot, AttributeDef, AttributeSchema, LabelCodec, Vocab, ATTRIBUTE_NAMES,
    CELL_TYPES,
};
pub use split::{split_dataset, SplitSpec};
pub use synth::{generate_synthetic, render_cell, write_synthetic, SynthLabels};

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("manifest is missing column `{0}`")]
    MissingColumn(String),
    #[error("cannot read image {path}: {reason}")]
    Image { path: String, reason: String },
    #[error("duplicate id `{id}` at rows {first} and {second}")]
    DuplicateId {
        id: String,
        first: usize,
        second: usize,
    },
    #[error("{}", describe_unknown(.0))]
    Vocabulary(Vec<UnknownValue>),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("augmentation error: {0}")]
    Augment(String),
    #[error("one-hot index {index} out of range for {classes} classes")]
    OneHot { index: usize, classes: usize },
}

/// A label value outside its vocabulary. `row` is the 1-based data row of
/// the manifest (0 when not loaded from a file).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnknownValue {
    pub row: usize,
    pub attribute: String,
    pub value: String,
}

fn describe_unknown(values: &[UnknownValue]) -> String {
    let first = &values[0];
    let mut msg = format!(
        "vocabulary error: row {} has value `{}` not in the vocabulary of {}",
        first.row, first.value, first.attribute
    );
    if values.len() > 1 {
        msg.push_str(&format!(" ({} unknown values in total)", values.len()));
    }
    msg
}

impl DataError {
    pub(crate) fn unknown(row: usize, attribute: &str, value: &str) -> Self {
        DataError::Vocabulary(vec![UnknownValue {
            row,
            attribute: attribute.to_string(),
            value: value.to_string(),
        }])
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Seed,
    Pool,
    Synthetic,
}

/// One image with optional labels. Pixels are `3×H×W` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub path: Option<PathBuf>,
    pub pixels: Tensor,
    pub cell_type: Option<String>,
    pub attributes: BTreeMap<String, String>,
    pub source: Source,
}

impl ImageRecord {
    pub fn is_fully_labeled(&self, codec: &LabelCodec) -> bool {
        self.cell_type.is_some()
            && codec
                .attributes
                .iter()
                .all(|(n, _)| self.attributes.contains_key(n))
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.pixels.shape()[1], self.pixels.shape()[2])
    }
}
