//! Work directories produced by `iterate`: the current seed and pool
//! manifests plus the loop configuration, and one directory per iteration.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use cellattr_core::annotator::{
    bootstrap_iterate, merge_corrections, IterationConfig, IterationOutcome,
};
use cellattr_core::data::{load_manifest, write_manifest, LabelCodec};
use serde::{Deserialize, Serialize};

use crate::store::{latest_iteration, ReviewStore, StoreError};

pub const WORKSPACE_JSON: &str = "workspace.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub seed_manifest: PathBuf,
    pub pool_manifest: PathBuf,
    /// Side length images are resized to when manifests are loaded.
    pub image_size: usize,
    pub config: IterationConfig,
}

impl Workspace {
    pub fn load(work_dir: &Path) -> Result<Self, StoreError> {
        let path = work_dir.join(WORKSPACE_JSON);
        let text = std::fs::read_to_string(&path).map_err(|source| StoreError::Io {
            path: path.clone(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
            path,
            reason: e.to_string(),
        })
    }

    pub fn save(&self, work_dir: &Path) -> Result<(), StoreError> {
        std::fs::create_dir_all(work_dir).map_err(|source| StoreError::Io {
            path: work_dir.to_path_buf(),
            source,
        })?;
        let path = work_dir.join(WORKSPACE_JSON);
        std::fs::write(
            &path,
            serde_json::to_string_pretty(self).expect("workspace serializes"),
        )
        .map_err(|source| StoreError::Io { path, source })
    }

    pub fn exists(work_dir: &Path) -> bool {
        work_dir.join(WORKSPACE_JSON).exists()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IterateError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Annotate(#[from] cellattr_core::annotator::AnnotateError),
    #[error(transparent)]
    Data(#[from] cellattr_core::data::DataError),
}

/// Runs the next iteration. Reviewed records of the current iteration are
/// merged into the seed set and removed from the pool first; the updated
/// manifests are written into the new iteration directory.
pub fn run_next_iteration(work_dir: &Path) -> Result<IterationOutcome, IterateError> {
    let mut ws = Workspace::load(work_dir)?;
    let schema = &ws.config.schema;
    let mut seed = load_manifest(&ws.seed_manifest, schema, ws.image_size)?;
    let mut pool = load_manifest(&ws.pool_manifest, schema, ws.image_size)?;
    let next = latest_iteration(work_dir).map_or(0, |k| k + 1);

    if next > 0 {
        let store = ReviewStore::open(work_dir)?;
        let reviewed = store.reviewed();
        if !reviewed.is_empty() {
            let codec = match store.codec() {
                Some(c) => c.clone(),
                None => LabelCodec::from_schema(schema)?,
            };
            seed = merge_corrections(seed, &reviewed, &pool, &codec)?;
            let merged: HashSet<&str> = reviewed.iter().map(|r| r.id.as_str()).collect();
            pool.retain(|r| !merged.contains(r.id.as_str()));
            let dir = work_dir.join("iterations").join(next.to_string());
            std::fs::create_dir_all(&dir).map_err(|source| StoreError::Io {
                path: dir.clone(),
                source,
            })?;
            ws.seed_manifest = dir.join("seed_manifest.csv");
            ws.pool_manifest = dir.join("pool_manifest.csv");
            write_manifest(&ws.seed_manifest, &seed)?;
            write_manifest(&ws.pool_manifest, &pool)?;
            ws.save(work_dir)?;
        }
    }
    Ok(bootstrap_iterate(&seed, &pool, &ws.config, work_dir, next)?)
}
