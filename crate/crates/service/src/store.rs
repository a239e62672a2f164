//! Review state for one annotation run, persisted as an append-only log of
//! review events that is replayed on open.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use cellattr_core::annotator::{
    validate_corrections, AnnotateError, AnnotationRecord, ReviewStatus, RunInfo, ANNOTATIONS_JSON,
};
use cellattr_core::data::LabelCodec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const REVIEWS_LOG: &str = "reviews.log";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown record `{0}`")]
    NotFound(String),
    #[error("record `{id}` was already reviewed differently ({status})")]
    Conflict { id: String, status: &'static str },
    #[error("{attribute}: value {value:?} is not in the vocabulary")]
    Invalid { attribute: String, value: String },
    #[error("a correction must change at least one facet")]
    EmptyCorrection,
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error(transparent)]
    Run(#[from] AnnotateError),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Accept,
    Correct,
}

/// Body of a review request.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewBody {
    pub decision: Decision,
    #[serde(default)]
    pub corrections: BTreeMap<String, String>,
}

/// One line of the review log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewEvent {
    pub iteration: usize,
    pub id: String,
    #[serde(flatten)]
    pub body: ReviewBody,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub rank: usize,
    pub record: AnnotationRecord,
    pub image_url: String,
    pub saliency_heads: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub machine: usize,
    pub accepted: usize,
    pub corrected: usize,
}

/// Annotations of the current iteration plus their review state.
#[derive(Debug)]
pub struct ReviewStore {
    pub work_dir: PathBuf,
    /// Directory holding `annotations.json` and `run.json`.
    pub dir: PathBuf,
    pub iteration: usize,
    pub run: Option<RunInfo>,
    records: BTreeMap<String, AnnotationRecord>,
    log: PathBuf,
}

/// Latest `iterations/<k>` directory, if any.
pub fn latest_iteration(work_dir: &Path) -> Option<usize> {
    std::fs::read_dir(work_dir.join("iterations"))
        .ok()?
        .filter_map(|e| e.ok()?.file_name().to_str()?.parse::<usize>().ok())
        .max()
}

/// Where the current annotations live: the latest iteration directory, or
/// the work directory itself for a plain `annotate` output.
pub fn annotation_dir(work_dir: &Path) -> (PathBuf, usize) {
    match latest_iteration(work_dir) {
        Some(k) => (work_dir.join("iterations").join(k.to_string()), k),
        None => (work_dir.to_path_buf(), 0),
    }
}

impl ReviewStore {
    pub fn open(work_dir: &Path) -> Result<Self, StoreError> {
        let (dir, mut iteration) = annotation_dir(work_dir);
        let run = if dir.join(cellattr_core::annotator::RUN_JSON).exists() {
            Some(RunInfo::load(&dir)?)
        } else {
            None
        };
        let path = dir.join(ANNOTATIONS_JSON);
        let records: Vec<AnnotationRecord> = if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(io(&path))?;
            serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
                path: path.clone(),
                reason: e.to_string(),
            })?
        } else {
            Vec::new()
        };
        if let Some(r) = &run {
            iteration = r.iteration;
        }
        let mut store = Self {
            work_dir: work_dir.to_path_buf(),
            dir,
            iteration,
            run,
            records: records.into_iter().map(|r| (r.id.clone(), r)).collect(),
            log: work_dir.join(REVIEWS_LOG),
        };
        store.replay()?;
        Ok(store)
    }

    fn replay(&mut self) -> Result<(), StoreError> {
        let Ok(text) = std::fs::read_to_string(&self.log) else {
            return Ok(());
        };
        for (n, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let event: ReviewEvent =
                serde_json::from_str(line).map_err(|e| StoreError::Corrupt {
                    path: self.log.clone(),
                    reason: format!("line {}: {e}", n + 1),
                })?;
            if event.iteration == self.iteration {
                self.apply(&event.id, &event.body)?;
            }
        }
        Ok(())
    }

    pub fn codec(&self) -> Option<&LabelCodec> {
        self.run.as_ref().map(|r| &r.codec)
    }

    pub fn get(&self, id: &str) -> Option<&AnnotationRecord> {
        self.records.get(id)
    }

    pub fn records(&self) -> impl Iterator<Item = &AnnotationRecord> {
        self.records.values()
    }

    pub fn reviewed(&self) -> Vec<AnnotationRecord> {
        self.records
            .values()
            .filter(|r| r.review_status != ReviewStatus::Machine)
            .cloned()
            .collect()
    }

    pub fn image_path(&self, id: &str) -> Option<PathBuf> {
        let rel = self.records.get(id)?.image.as_ref()?;
        Some(self.dir.join(rel))
    }

    /// Applies a review in memory. Returns the record and whether anything
    /// changed; repeating the decision that produced the current state is a
    /// no-op.
    fn apply(
        &mut self,
        id: &str,
        body: &ReviewBody,
    ) -> Result<(AnnotationRecord, bool), StoreError> {
        let codec = self.run.as_ref().map(|r| &r.codec);
        let record = self
            .records
            .get_mut(id)
            .ok_or_else(|| StoreError::NotFound(id.to_string()))?;
        if let Some(codec) = codec {
            validate_corrections(&body.corrections, codec).map_err(|e| match e {
                AnnotateError::Vocabulary { attribute, value } => {
                    StoreError::Invalid { attribute, value }
                }
                other => StoreError::Run(other),
            })?;
        }
        let (status, corrections) = match body.decision {
            Decision::Accept => (ReviewStatus::Accepted, BTreeMap::new()),
            Decision::Correct if body.corrections.is_empty() => {
                return Err(StoreError::EmptyCorrection)
            }
            Decision::Correct => (ReviewStatus::Corrected, body.corrections.clone()),
        };
        if record.review_status == ReviewStatus::Machine {
            record.review_status = status;
            record.corrected_values = corrections;
            return Ok((record.clone(), true));
        }
        if record.review_status == status && record.corrected_values == corrections {
            return Ok((record.clone(), false));
        }
        Err(StoreError::Conflict {
            id: id.to_string(),
            status: record.review_status.as_str(),
        })
    }

    /// Applies a review and appends it to the log when it changed state.
    pub fn review(&mut self, id: &str, body: &ReviewBody) -> Result<AnnotationRecord, StoreError> {
        let (record, changed) = self.apply(id, body)?;
        if changed {
            let event = ReviewEvent {
                iteration: self.iteration,
                id: id.to_string(),
                body: body.clone(),
            };
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&self.log)
                .map_err(io(&self.log))?;
            let line = serde_json::to_string(&event).expect("event serializes") + "\n";
            file.write_all(line.as_bytes()).map_err(io(&self.log))?;
            file.sync_data().map_err(io(&self.log))?;
        }
        Ok(record)
    }

    /// Machine-labeled records, least confident first.
    pub fn queue(&self, limit: usize, offset: usize) -> Vec<ReviewItem> {
        let mut pending: Vec<&AnnotationRecord> = self
            .records
            .values()
            .filter(|r| r.review_status == ReviewStatus::Machine)
            .collect();
        pending.sort_by(|a, b| {
            a.min_confidence
                .total_cmp(&b.min_confidence)
                .then_with(|| a.id.cmp(&b.id))
        });
        pending
            .into_iter()
            .enumerate()
            .skip(offset)
            .take(limit)
            .map(|(rank, r)| ReviewItem {
                rank,
                record: r.clone(),
                image_url: format!("/api/images/{}", r.id),
                saliency_heads: r.facets().map(|f| f.name.clone()).collect(),
            })
            .collect()
    }

    pub fn counts(&self) -> StatusCounts {
        let mut c = StatusCounts::default();
        for r in self.records.values() {
            match r.review_status {
                ReviewStatus::Machine => c.machine += 1,
                ReviewStatus::Accepted => c.accepted += 1,
                ReviewStatus::Corrected => c.corrected += 1,
            }
        }
        c
    }
}
