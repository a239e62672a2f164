use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DataError, ImageRecord};

/// Canonical attribute order, as CSV column names.
pub const ATTRIBUTE_NAMES: [&str; 11] = [
    "cell_size",
    "cell_shape",
    "nucleus_shape",
    "nc_ratio",
    "chromatin_density",
    "cytoplasm_texture",
    "cytoplasm_colour",
    "cytoplasm_vacuole",
    "granularity",
    "granule_type",
    "granule_colour",
];

/// The eight peripheral blood cell classes.
pub const CELL_TYPES: [&str; 8] = [
    "basophil",
    "eosinophil",
    "erythroblast",
    "immature granulocyte",
    "lymphocyte",
    "monocyte",
    "neutrophil",
    "platelet",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeDef {
    pub name: String,
    /// Allowed values, alphabetical. Empty means "accept anything" when
    /// loading a manifest whose vocabulary is not known up front.
    pub values: Vec<String>,
}

/// Ordered attribute heads with their value vocabularies, plus the cell-type
/// vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub cell_types: Vec<String>,
    pub attributes: Vec<AttributeDef>,
}

impl AttributeSchema {
    pub fn new(cell_types: Vec<String>, attributes: Vec<AttributeDef>) -> Result<Self, DataError> {
        let schema = Self {
            cell_types,
            attributes,
        };
        schema.validate()?;
        Ok(schema)
    }

    /// Default vocabulary used by the synthetic generator: the eight cell
    /// types and 2 to 6 values per attribute.
    pub fn synthetic_default() -> Self {
        let vocab: [&[&str]; 11] = [
            &["big", "small"],
            &["irregular", "round"],
            &[
                "irregular",
                "segmented-bilobed",
                "segmented-multilobed",
                "unsegmented-band",
                "unsegmented-indented",
                "unsegmented-round",
            ],
            &["high", "low"],
            &["densely", "loosely"],
            &["clear", "frosted"],
            &["blue", "light blue", "purple blue"],
            &["no", "yes"],
            &["no", "yes"],
            &["nil", "round", "small"],
            &["nil", "pink", "purple", "red"],
        ];
        let attributes = ATTRIBUTE_NAMES
            .iter()
            .zip(vocab)
            .map(|(name, values)| AttributeDef {
                name: name.to_string(),
                values: values.iter().map(|v| v.to_string()).collect(),
            })
            .collect();
        Self::new(
            CELL_TYPES.iter().map(|s| s.to_string()).collect(),
            attributes,
        )
        .expect("valid default schema")
    }

    /// The canonical attribute names with open vocabularies.
    pub fn open() -> Self {
        Self {
            cell_types: Vec::new(),
            attributes: ATTRIBUTE_NAMES
                .iter()
                .map(|n| AttributeDef {
                    name: n.to_string(),
                    values: Vec::new(),
                })
                .collect(),
        }
    }

    pub fn attribute_names(&self) -> impl Iterator<Item = &str> {
        self.attributes.iter().map(|a| a.name.as_str())
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut names = BTreeSet::new();
        for attr in &self.attributes {
            if !names.insert(attr.name.as_str()) {
                return Err(DataError::Schema(format!(
                    "duplicate attribute {}",
                    attr.name
                )));
            }
            check_sorted_unique(&attr.name, &attr.values)?;
        }
        check_sorted_unique("cell type", &self.cell_types)
    }
}

fn check_sorted_unique(what: &str, values: &[String]) -> Result<(), DataError> {
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DataError::Schema(format!(
            "vocabulary of {what} must be alphabetical without duplicates: {values:?}"
        )));
    }
    Ok(())
}

/// Bijection between value strings and class indices, indices assigned in
/// ascending alphabetical order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    values: Vec<String>,
}

impl Vocab {
    pub fn new<S: Into<String>>(values: impl IntoIterator<Item = S>) -> Self {
        let set: BTreeSet<String> = values.into_iter().map(Into::into).collect();
        Self {
            values: set.into_iter().collect(),
        }
    }

    pub fn encode(&self, value: &str) -> Option<usize> {
        self.values.binary_search_by(|v| v.as_str().cmp(value)).ok()
    }

    pub fn decode(&self, index: usize) -> Option<&str> {
        self.values.get(index).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[String] {
        &self.values
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCodec {
    pub cell_types: Vocab,
    /// Attribute name and vocabulary, in head order.
    pub attributes: Vec<(String, Vocab)>,
}

impl LabelCodec {
    pub fn from_schema(schema: &AttributeSchema) -> Result<Self, DataError> {
        if schema.cell_types.is_empty() || schema.attributes.iter().any(|a| a.values.is_empty()) {
            return Err(DataError::Schema("schema has an empty vocabulary".into()));
        }
        Ok(Self {
            cell_types: Vocab::new(schema.cell_types.iter().cloned()),
            attributes: schema
                .attributes
                .iter()
                .map(|a| (a.name.clone(), Vocab::new(a.values.iter().cloned())))
                .collect(),
        })
    }

    pub fn attribute(&self, name: &str) -> Option<&Vocab> {
        self.attributes
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    pub fn head_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|(n, _)| n == name)
    }

    /// `(attribute name, class count)` per head.
    pub fn head_specs(&self) -> Vec<(String, usize)> {
        self.attributes
            .iter()
            .map(|(n, v)| (n.clone(), v.len()))
            .collect()
    }

    /// Hex SHA-256 over the canonical listing of every vocabulary.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"cell_type=");
        hasher.update(self.cell_types.values().join("\u{1f}").as_bytes());
        for (name, vocab) in &self.attributes {
            hasher.update(b"\n");
            hasher.update(name.as_bytes());
            hasher.update(b"=");
            hasher.update(vocab.values().join("\u{1f}").as_bytes());
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Checks every label of `record` against the vocabularies.
    pub fn validate_record(&self, record: &ImageRecord) -> Result<(), DataError> {
        if let Some(ct) = &record.cell_type {
            if self.cell_types.encode(ct).is_none() {
                return Err(DataError::unknown(0, "label", ct));
            }
        }
        for (name, value) in &record.attributes {
            let vocab = self
                .attribute(name)
                .ok_or_else(|| DataError::Schema(format!("unknown attribute {name}")))?;
            if vocab.encode(value).is_none() {
                return Err(DataError::unknown(0, name, value));
            }
        }
        Ok(())
    }
}

/// Builds a codec from the values observed in `records`, keeping the
/// attribute order of `schema`.
pub fn build_codec(
    records: &[ImageRecord],
    schema: &AttributeSchema,
) -> Result<LabelCodec, DataError> {
    if records.is_empty() {
        return Err(DataError::Schema("no records to build a codec from".into()));
    }
    let cell_types = Vocab::new(records.iter().filter_map(|r| r.cell_type.clone()));
    if cell_types.is_empty() {
        return Err(DataError::Schema("no cell-type labels observed".into()));
    }
    let mut attributes = Vec::with_capacity(schema.attributes.len());
    for attr in &schema.attributes {
        let vocab = Vocab::new(
            records
                .iter()
                .filter_map(|r| r.attributes.get(&attr.name).cloned()),
        );
        if vocab.is_empty() {
            return Err(DataError::Schema(format!(
                "attribute {} has no observed values",
                attr.name
            )));
        }
        attributes.push((attr.name.clone(), vocab));
    }
    Ok(LabelCodec {
        cell_types,
        attributes,
    })
}

pub fn one_hot(index: usize, classes: usize) -> Result<Vec<f32>, DataError> {
    if index >= classes {
        return Err(DataError::OneHot { index, classes });
    }
    let mut v = vec![0.0; classes];
    v[index] = 1.0;
    Ok(v)
}
