//! The annotation loop: qualify a model against a human baseline, annotate
//! an unlabeled pool with both models, merge reviewed annotations back into
//! the seed set and iterate.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    augment_pixels, build_codec, encode_png, split_dataset, AttributeSchema, DataError,
    ImageRecord, LabelCodec, Pipeline, Source, SplitSpec,
};
use crate::metrics::MetricsReport;
use crate::models::{save_checkpoint, Cnn, CnnConfig, Model, ModelError, Vit, VitConfig};
use crate::tensor::{softmax_vec, Tensor};
use crate::trainer::{evaluate_cnn, evaluate_vit, train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("qualification gate refused: GAA {measured:.4} is {gap_points:.2} pt below the {baseline:.4} baseline (max gap {max_gap:.4})")]
    GateRefused {
        measured: f64,
        baseline: f64,
        max_gap: f64,
        gap_points: f64,
    },
    #[error("record {id}: {model} expects {expected}×{expected} input, preprocessing produced {found:?}")]
    InputSize {
        id: String,
        model: &'static str,
        expected: usize,
        found: Vec<usize>,
    },
    #[error("expected {expected} logit groups, got {found}")]
    Heads { expected: usize, found: usize },
    #[error("record {0} is still machine-labeled and cannot be merged")]
    Unreviewed(String),
    #[error("record {0} is already in the seed set")]
    Duplicate(String),
    #[error("record {0} has no pool image")]
    MissingImage(String),
    #[error("correction {attribute}={value:?} is outside the vocabulary")]
    Vocabulary { attribute: String, value: String },
    #[error("sink write failed: {0}")]
    Sink(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] crate::models::CheckpointError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AnnotateError + '_ {
    move |source| AnnotateError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReviewStatus {
    Machine,
    Accepted,
    Corrected,
}

impl ReviewStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ReviewStatus::Machine => "machine",
            ReviewStatus::Accepted => "accepted",
            ReviewStatus::Corrected => "corrected",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Facet {
    pub name: String,
    pub value: String,
    pub confidence: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelVersions {
    pub cnn: String,
    pub vit: String,
}

/// Twelve-facet profile of one image: cell type plus every attribute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub cell_type: Facet,
    pub attributes: Vec<Facet>,
    pub min_confidence: f64,
    pub model_versions: ModelVersions,
    /// Inference wall-clock share of this image, milliseconds.
    pub latency_ms: f64,
    /// Preprocessing wall-clock share of this image, milliseconds.
    pub preprocess_ms: f64,
    pub review_status: ReviewStatus,
    /// Facet name to corrected value; non-empty exactly when corrected.
    #[serde(default)]
    pub corrected_values: BTreeMap<String, String>,
    pub iteration: usize,
    /// Image path relative to the annotation directory, when written.
    #[serde(default)]
    pub image: Option<String>,
}

impl AnnotationRecord {
    pub fn facets(&self) -> impl Iterator<Item = &Facet> {
        std::iter::once(&self.cell_type).chain(&self.attributes)
    }

    /// Effective labels: machine values with corrections applied.
    pub fn labels(&self) -> (String, BTreeMap<String, String>) {
        let pick = |f: &Facet| {
            self.corrected_values
                .get(&f.name)
                .cloned()
                .unwrap_or_else(|| f.value.clone())
        };
        (
            pick(&self.cell_type),
            self.attributes
                .iter()
                .map(|f| (f.name.clone(), pick(f)))
                .collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub human_baseline: f64,
    pub max_gap: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            human_baseline: 0.961,
            max_gap: 0.015,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualificationGate {
    pub human_baseline: f64,
    pub max_gap: f64,
    pub measured_gaa: f64,
    /// `human_baseline - measured_gaa`.
    pub gap: f64,
    pub qualified: bool,
}

impl QualificationGate {
    pub fn gap_points(&self) -> f64 {
        self.gap * 100.0
    }
}

/// Qualified when the GAA is at most `max_gap` below the baseline. A 1e-12
/// slack absorbs decimal-to-binary rounding of the configured figures.
pub fn qualify(report: &MetricsReport, config: &GateConfig) -> QualificationGate {
    qualify_gaa(report.gaa, config)
}

pub fn qualify_gaa(measured: f64, config: &GateConfig) -> QualificationGate {
    let gap = config.human_baseline - measured;
    QualificationGate {
        human_baseline: config.human_baseline,
        max_gap: config.max_gap,
        measured_gaa: measured,
        gap,
        qualified: gap <= config.max_gap + 1e-12,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub image_count: usize,
    pub per_cell_ms: f64,
    /// `image_count × per_cell_ms / 1000`.
    pub projected_seconds: f64,
    pub measured_seconds: Option<f64>,
    pub measured_preprocess_seconds: Option<f64>,
    pub measured_inference_seconds: Option<f64>,
}

impl ThroughputReport {
    pub fn project(image_count: usize, per_cell_ms: f64) -> Self {
        Self {
            image_count,
            per_cell_ms,
            projected_seconds: image_count as f64 * per_cell_ms / 1000.0,
            measured_seconds: None,
            measured_preprocess_seconds: None,
            measured_inference_seconds: None,
        }
    }

    pub fn projected_minutes(&self) -> f64 {
        self.projected_seconds / 60.0
    }
}

/// Raw outputs of both models for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct DualOutput {
    pub id: String,
    pub cell_logits: Vec<f32>,
    pub head_logits: Vec<Vec<f32>>,
    pub preprocess_ms: f64,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub cnn: Pipeline,
    pub vit: Pipeline,
}

impl Preprocessing {
    /// Evaluation pipelines for the given model input sizes.
    pub fn eval(cnn_size: usize, vit_size: usize) -> Self {
        Self {
            cnn: Pipeline::Resize { size: cnn_size },
            vit: Pipeline::vit_eval(vit_size),
        }
    }
}

fn stack(
    records: &[ImageRecord],
    pipeline: &Pipeline,
    size: usize,
    model: &'static str,
) -> Result<Tensor, AnnotateError> {
    let mut data = Vec::with_capacity(records.len() * 3 * size * size);
    for r in records {
        let px = augment_pixels(&r.pixels, &r.id, pipeline, 0, 0)?;
        if px.shape() != [3, size, size] {
            return Err(AnnotateError::InputSize {
                id: r.id.clone(),
                model,
                expected: size,
                found: px.shape().to_vec(),
            });
        }
        data.extend_from_slice(px.data());
    }
    Ok(Tensor::new([records.len(), 3, size, size], data).expect("stacked batch"))
}

fn rows(t: &Tensor) -> Vec<Vec<f32>> {
    let k = t.shape()[1];
    t.data().chunks(k).map(<[f32]>::to_vec).collect()
}

/// Runs both models over one batch. With `concurrent` the two passes run on
/// separate threads; the numbers are identical either way.
pub fn dual_infer(
    cnn: &Cnn,
    vit: &Vit,
    batch: &[ImageRecord],
    prep: &Preprocessing,
    concurrent: bool,
) -> Result<Vec<DualOutput>, AnnotateError> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let started = Instant::now();
    let x_cnn = stack(batch, &prep.cnn, cnn.config.input_size, "cnn")?;
    let x_vit = stack(batch, &prep.vit, vit.config.input_size, "vit")?;
    let preprocess = started.elapsed().as_secs_f64() * 1000.0;

    let started = Instant::now();
    let (cell, heads) = if concurrent {
        std::thread::scope(|s| {
            let c = s.spawn(|| cnn.infer(&x_cnn));
            let v = vit.infer(&x_vit);
            (c.join().expect("cnn inference panicked"), v)
        })
    } else {
        (cnn.infer(&x_cnn), vit.infer(&x_vit))
    };
    let (cell, heads) = (cell?, heads?);
    let inference = started.elapsed().as_secs_f64() * 1000.0;

    let n = batch.len() as f64;
    let cell_rows = rows(&cell);
    let head_rows: Vec<Vec<Vec<f32>>> = heads.iter().map(rows).collect();
    Ok(batch
        .iter()
        .enumerate()
        .map(|(i, r)| DualOutput {
            id: r.id.clone(),
            cell_logits: cell_rows[i].clone(),
            head_logits: head_rows.iter().map(|h| h[i].clone()).collect(),
            preprocess_ms: preprocess / n,
            latency_ms: inference / n,
        })
        .collect())
}

/// Lowest index among the maxima, and its softmax probability.
fn decide(logits: &[f32]) -> (usize, f64) {
    let probs = softmax_vec(logits);
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    (best, probs[best] as f64)
}

/// Decodes both models' logits into a machine-labeled profile.
pub fn fuse_profile(
    id: &str,
    cell_logits: &[f32],
    head_logits: &[Vec<f32>],
    codec: &LabelCodec,
) -> Result<AnnotationRecord, AnnotateError> {
    if head_logits.len() != codec.attributes.len() {
        return Err(AnnotateError::Heads {
            expected: codec.attributes.len(),
            found: head_logits.len(),
        });
    }
    let facet =
        |name: &str, vocab: &crate::data::Vocab, logits: &[f32]| -> Result<Facet, AnnotateError> {
            if logits.len() != vocab.len() {
                return Err(AnnotateError::Heads {
                    expected: vocab.len(),
                    found: logits.len(),
                });
            }
            let (index, confidence) = decide(logits);
            Ok(Facet {
                name: name.to_string(),
                value: vocab
                    .decode(index)
                    .expect("index within vocabulary")
                    .to_string(),
                confidence,
            })
        };
    let cell_type = facet("cell_type", &codec.cell_types, cell_logits)?;
    let attributes = codec
        .attributes
        .iter()
        .zip(head_logits)
        .map(|((name, vocab), l)| facet(name, vocab, l))
        .collect::<Result<Vec<_>, _>>()?;
    let min_confidence = std::iter::once(&cell_type)
        .chain(&attributes)
        .map(|f| f.confidence)
        .fold(f64::INFINITY, f64::min);
    Ok(AnnotationRecord {
        id: id.to_string(),
        cell_type,
        attributes,
        min_confidence,
        model_versions: ModelVersions::default(),
        latency_ms: 0.0,
        preprocess_ms: 0.0,
        review_status: ReviewStatus::Machine,
        corrected_values: BTreeMap::new(),
        iteration: 0,
        image: None,
    })
}

/// Destination for emitted annotations.
pub trait AnnotationSink {
    fn write(
        &mut self,
        record: &mut AnnotationRecord,
        image: &ImageRecord,
    ) -> Result<(), AnnotateError>;
    fn finish(&mut self) -> Result<(), AnnotateError>;
}

/// Collects records in memory.
#[derive(Default)]
pub struct VecSink {
    pub records: Vec<AnnotationRecord>,
}

impl AnnotationSink for VecSink {
    fn write(
        &mut self,
        record: &mut AnnotationRecord,
        _: &ImageRecord,
    ) -> Result<(), AnnotateError> {
        self.records.push(record.clone());
        Ok(())
    }

    fn finish(&mut self) -> Result<(), AnnotateError> {
        Ok(())
    }
}

pub const ANNOTATIONS_CSV: &str = "annotations.csv";
pub const ANNOTATIONS_JSON: &str = "annotations.json";

/// Header of the annotation CSV: the manifest columns followed by the
/// confidence, status and latency columns.
pub fn annotation_header(codec: &LabelCodec) -> Vec<String> {
    let mut h = vec!["path".to_string(), "label".to_string()];
    h.extend(codec.attributes.iter().map(|(n, _)| n.clone()));
    h.push("cell_confidence".into());
    h.extend(
        codec
            .attributes
            .iter()
            .map(|(n, _)| format!("{n}_confidence")),
    );
    for c in ["min_confidence", "review_status", "iteration", "latency_ms"] {
        h.push(c.into());
    }
    h
}

/// Writes `annotations.csv` incrementally and `annotations.json` on
/// finish. Images without a source path are written to `images/<id>.png`.
/// Nothing touches the disk before the first write or finish.
pub struct FileSink {
    dir: PathBuf,
    header: Vec<String>,
    csv: Option<csv::Writer<File>>,
    records: Vec<AnnotationRecord>,
}

impl FileSink {
    pub fn new(dir: &Path, codec: &LabelCodec) -> Self {
        Self {
            dir: dir.to_path_buf(),
            header: annotation_header(codec),
            csv: None,
            records: Vec::new(),
        }
    }

    fn writer(&mut self) -> Result<&mut csv::Writer<File>, AnnotateError> {
        if self.csv.is_none() {
            std::fs::create_dir_all(&self.dir).map_err(io_err(&self.dir))?;
            let path = self.dir.join(ANNOTATIONS_CSV);
            let mut w =
                csv::Writer::from_path(&path).map_err(|e| AnnotateError::Sink(e.to_string()))?;
            w.write_record(&self.header)
                .map_err(|e| AnnotateError::Sink(e.to_string()))?;
            self.csv = Some(w);
        }
        Ok(self.csv.as_mut().expect("just opened"))
    }
}

impl AnnotationSink for FileSink {
    fn write(
        &mut self,
        record: &mut AnnotationRecord,
        image: &ImageRecord,
    ) -> Result<(), AnnotateError> {
        self.writer()?;
        let rel = match &image.path {
            Some(p) => crate::data::relative_to(p, &self.dir),
            None => {
                let rel = PathBuf::from("images").join(format!("{}.png", image.id));
                let full = self.dir.join(&rel);
                std::fs::create_dir_all(full.parent().expect("images dir"))
                    .map_err(io_err(&full))?;
                std::fs::write(&full, encode_png(&image.pixels)).map_err(io_err(&full))?;
                rel
            }
        };
        let rel = rel.to_string_lossy().replace('\\', "/");
        record.image = Some(rel.clone());
        let (label, attrs) = record.labels();
        let mut row = vec![rel, label];
        row.extend(record.attributes.iter().map(|f| attrs[&f.name].clone()));
        row.push(record.cell_type.confidence.to_string());
        row.extend(record.attributes.iter().map(|f| f.confidence.to_string()));
        row.push(record.min_confidence.to_string());
        row.push(record.review_status.as_str().into());
        row.push(record.iteration.to_string());
        row.push(record.latency_ms.to_string());
        self.writer()?
            .write_record(&row)
            .map_err(|e| AnnotateError::Sink(e.to_string()))?;
        self.records.push(record.clone());
        Ok(())
    }

    fn finish(&mut self) -> Result<(), AnnotateError> {
        self.writer()?
            .flush()
            .map_err(|e| AnnotateError::Sink(e.to_string()))?;
        let path = self.dir.join(ANNOTATIONS_JSON);
        let json = serde_json::to_string_pretty(&self.records).expect("records serialize");
        std::fs::write(&path, json).map_err(io_err(&path))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotateOptions {
    pub override_gate: bool,
    pub per_cell_ms: f64,
    pub batch_size: usize,
    pub iteration: usize,
    pub preprocessing: Preprocessing,
    pub versions: ModelVersions,
}

impl AnnotateOptions {
    pub fn new(cnn: &Cnn, vit: &Vit) -> Self {
        Self {
            override_gate: false,
            per_cell_ms: 20.0,
            batch_size: 16,
            iteration: 0,
            preprocessing: Preprocessing::eval(cnn.config.input_size, vit.config.input_size),
            versions: ModelVersions::default(),
        }
    }
}

/// Annotates every pool image with both models and streams the records to
/// `sink`. Refuses to start on an unqualified gate unless overridden.
pub fn annotate_pool(
    cnn: &Cnn,
    vit: &Vit,
    pool: &[ImageRecord],
    codec: &LabelCodec,
    gate: &QualificationGate,
    options: &AnnotateOptions,
    sink: &mut dyn AnnotationSink,
) -> Result<(Vec<AnnotationRecord>, ThroughputReport), AnnotateError> {
    if !gate.qualified && !options.override_gate {
        return Err(AnnotateError::GateRefused {
            measured: gate.measured_gaa,
            baseline: gate.human_baseline,
            max_gap: gate.max_gap,
            gap_points: gate.gap_points(),
        });
    }
    let started = Instant::now();
    let (mut preprocess, mut inference) = (0.0, 0.0);
    let mut out = Vec::with_capacity(pool.len());
    for chunk in pool.chunks(options.batch_size.max(1)) {
        for (dual, image) in dual_infer(cnn, vit, chunk, &options.preprocessing, true)?
            .into_iter()
            .zip(chunk)
        {
            let mut rec = fuse_profile(&dual.id, &dual.cell_logits, &dual.head_logits, codec)?;
            rec.model_versions = options.versions.clone();
            rec.latency_ms = dual.latency_ms;
            rec.preprocess_ms = dual.preprocess_ms;
            rec.iteration = options.iteration;
            preprocess += dual.preprocess_ms / 1000.0;
            inference += dual.latency_ms / 1000.0;
            sink.write(&mut rec, image)?;
            out.push(rec);
        }
    }
    sink.finish()?;
    let mut throughput = ThroughputReport::project(pool.len(), options.per_cell_ms);
    throughput.measured_seconds = Some(started.elapsed().as_secs_f64());
    throughput.measured_preprocess_seconds = Some(preprocess);
    throughput.measured_inference_seconds = Some(inference);
    Ok((out, throughput))
}

/// Adds reviewed pool images to the seed set, labeled with the machine
/// values overridden by any corrections. Merged records keep `Source::Pool`.
pub fn merge_corrections(
    seed: Vec<ImageRecord>,
    reviewed: &[AnnotationRecord],
    pool: &[ImageRecord],
    codec: &LabelCodec,
) -> Result<Vec<ImageRecord>, AnnotateError> {
    let mut ids: HashSet<String> = seed.iter().map(|r| r.id.clone()).collect();
    let mut merged = seed;
    for rec in reviewed {
        if rec.review_status == ReviewStatus::Machine {
            return Err(AnnotateError::Unreviewed(rec.id.clone()));
        }
        validate_corrections(&rec.corrected_values, codec)?;
        if !ids.insert(rec.id.clone()) {
            return Err(AnnotateError::Duplicate(rec.id.clone()));
        }
        let image = pool
            .iter()
            .find(|p| p.id == rec.id)
            .ok_or_else(|| AnnotateError::MissingImage(rec.id.clone()))?;
        let (cell_type, attributes) = rec.labels();
        merged.push(ImageRecord {
            id: rec.id.clone(),
            path: image.path.clone(),
            pixels: image.pixels.clone(),
            cell_type: Some(cell_type),
            attributes,
            source: Source::Pool,
        });
    }
    Ok(merged)
}

/// Every corrected facet must name a known facet and a vocabulary value.
pub fn validate_corrections(
    corrections: &BTreeMap<String, String>,
    codec: &LabelCodec,
) -> Result<(), AnnotateError> {
    for (facet, value) in corrections {
        let vocab = if facet == "cell_type" {
            Some(&codec.cell_types)
        } else {
            codec.attribute(facet)
        };
        if vocab.and_then(|v| v.encode(value)).is_none() {
            return Err(AnnotateError::Vocabulary {
                attribute: facet.clone(),
                value: value.clone(),
            });
        }
    }
    Ok(())
}

/// Everything one bootstrap iteration needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationConfig {
    pub schema: AttributeSchema,
    pub split: SplitSpec,
    /// `num_classes` is replaced by the codec's cell-type count.
    pub cnn: CnnConfig,
    /// `head_specs` are replaced by the codec's heads.
    pub vit: VitConfig,
    pub cnn_train: TrainConfig,
    pub vit_train: TrainConfig,
    pub gate: GateConfig,
    #[serde(default = "default_per_cell_ms")]
    pub per_cell_ms: f64,
    #[serde(default)]
    pub override_gate: bool,
    #[serde(default)]
    pub model_seed: u64,
}

fn default_per_cell_ms() -> f64 {
    20.0
}

impl IterationConfig {
    /// Desk-scale configuration for the default synthetic schema.
    pub fn desk() -> Self {
        Self {
            schema: AttributeSchema::synthetic_default(),
            split: SplitSpec::Fractions {
                train: 0.7,
                val: 0.15,
                test: 0.15,
                seed: 0,
            },
            cnn: CnnConfig::default(),
            vit: VitConfig::desk(Vec::new()),
            cnn_train: TrainConfig::cnn_default(64),
            vit_train: TrainConfig::vit_default(64),
            gate: GateConfig::default(),
            per_cell_ms: default_per_cell_ms(),
            override_gate: false,
            model_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationOutcome {
    pub iteration: usize,
    pub dir: PathBuf,
    pub report: MetricsReport,
    pub gate: QualificationGate,
    pub annotations: Vec<AnnotationRecord>,
    pub throughput: Option<ThroughputReport>,
    pub versions: ModelVersions,
}

/// Per-run metadata written next to the annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub iteration: usize,
    pub cnn_checkpoint: PathBuf,
    pub vit_checkpoint: PathBuf,
    pub codec: LabelCodec,
    pub preprocessing: Preprocessing,
    pub gate: QualificationGate,
    pub gaa: Option<f64>,
    pub throughput: Option<ThroughputReport>,
}

pub const RUN_JSON: &str = "run.json";

impl RunInfo {
    pub fn load(dir: &Path) -> Result<Self, AnnotateError> {
        let path = dir.join(RUN_JSON);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text)
            .map_err(|e| AnnotateError::Sink(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<(), AnnotateError> {
        write_json(&dir.join(RUN_JSON), self)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), AnnotateError> {
    std::fs::write(
        path,
        serde_json::to_string_pretty(value).expect("serializes"),
    )
    .map_err(io_err(path))
}

/// One loop turn: train both models on the seed set, evaluate on its
/// held-out split, qualify, and annotate the pool when qualified. Artifacts
/// go to `work_dir/iterations/<iteration>/`.
pub fn bootstrap_iterate(
    seed: &[ImageRecord],
    pool: &[ImageRecord],
    config: &IterationConfig,
    work_dir: &Path,
    iteration: usize,
) -> Result<IterationOutcome, AnnotateError> {
    let codec = build_codec(seed, &config.schema)?;
    let (train_set, val_set, test_set) = split_dataset(seed.to_vec(), &config.split)?;

    let cnn_config = CnnConfig {
        num_classes: codec.cell_types.len(),
        ..config.cnn.clone()
    };
    let vit_config = VitConfig {
        head_specs: codec.head_specs(),
        ..config.vit.clone()
    };
    let cnn = Cnn::new(cnn_config, config.model_seed)?;
    let vit = Vit::new(vit_config, config.model_seed.wrapping_add(1))?;
    let (cnn, cnn_log) = train(cnn, &train_set, &val_set, &codec, &config.cnn_train)?;
    let (vit, vit_log) = train(vit, &train_set, &val_set, &codec, &config.vit_train)?;

    let mut report = evaluate_vit(&vit, &test_set, &codec, &config.vit_train.eval_pipeline)?;
    report.cell_type = Some(evaluate_cnn(
        &cnn,
        &test_set,
        &codec,
        &config.cnn_train.eval_pipeline,
    )?);
    let gate = qualify(&report, &config.gate);

    let dir = work_dir.join("iterations").join(iteration.to_string());
    let ckpt_dir = dir.join("checkpoint");
    let metrics_dir = dir.join("metrics");
    for d in [&ckpt_dir, &metrics_dir] {
        std::fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let cnn_path = ckpt_dir.join("cnn.ckpt");
    let vit_path = ckpt_dir.join("vit.ckpt");
    let cnn_model = Model::Cnn(cnn);
    let vit_model = Model::Vit(vit);
    save_checkpoint(&cnn_path, &cnn_model, &codec)?;
    save_checkpoint(&vit_path, &vit_model, &codec)?;
    let versions = ModelVersions {
        cnn: crate::models::load_checkpoint(&cnn_path)?.id().to_string(),
        vit: crate::models::load_checkpoint(&vit_path)?.id().to_string(),
    };
    let (Model::Cnn(cnn), Model::Vit(vit)) = (cnn_model, vit_model) else {
        unreachable!("constructed above")
    };

    write_json(&metrics_dir.join("report.json"), &report)?;
    let table = metrics_dir.join("report.txt");
    std::fs::write(&table, report.render_table()).map_err(io_err(&table))?;
    write_json(&metrics_dir.join("gate.json"), &gate)?;
    cnn_log.write_jsonl(&metrics_dir.join("cnn_train.jsonl"))?;
    vit_log.write_jsonl(&metrics_dir.join("vit_train.jsonl"))?;

    let preprocessing = Preprocessing {
        cnn: config.cnn_train.eval_pipeline.clone(),
        vit: config.vit_train.eval_pipeline.clone(),
    };
    let (annotations, throughput) = if gate.qualified || config.override_gate {
        let mut options = AnnotateOptions::new(&cnn, &vit);
        options.override_gate = config.override_gate;
        options.per_cell_ms = config.per_cell_ms;
        options.iteration = iteration;
        options.preprocessing = preprocessing.clone();
        options.versions = versions.clone();
        let mut sink = FileSink::new(&dir, &codec);
        let (records, throughput) =
            annotate_pool(&cnn, &vit, pool, &codec, &gate, &options, &mut sink)?;
        (records, Some(throughput))
    } else {
        (Vec::new(), None)
    };
    RunInfo {
        iteration,
        cnn_checkpoint: cnn_path,
        vit_checkpoint: vit_path,
        codec,
        preprocessing,
        gate,
        gaa: Some(report.gaa),
        throughput: throughput.clone(),
    }
    .save(&dir)?;
    Ok(IterationOutcome {
        iteration,
        dir,
        report,
        gate,
        annotations,
        throughput,
        versions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, load_manifest};
    use crate::metrics::HeadMetrics;

    fn codec() -> LabelCodec {
        LabelCodec::from_schema(&AttributeSchema::synthetic_default()).unwrap()
    }

    fn models() -> (Cnn, Vit) {
        let cnn = Cnn::new(
            CnnConfig {
                input_size: 16,
                conv_blocks: vec![(4, 1)],
                fc_dims: vec![],
                num_classes: 8,
            },
            1,
        )
        .unwrap();
        let vit = Vit::new(
            VitConfig {
                input_size: 16,
                patch_size: 8,
                embed_dim: 8,
                depth: 1,
                num_heads: 2,
                mlp_ratio: 1.0,
                head_specs: codec().head_specs(),
            },
            2,
        )
        .unwrap();
        (cnn, vit)
    }

    fn report_with_gaa(gaa: f64) -> MetricsReport {
        MetricsReport {
            heads: vec![HeadMetrics::score("h", &["a".into(), "b".into()], &[0], &[0]).unwrap()],
            cell_type: None,
            gaa,
        }
    }

    #[test]
    fn gate_examples() {
        let g = qualify(&report_with_gaa(0.9462), &GateConfig::default());
        assert!(g.qualified);
        assert!((g.gap_points() - 1.48).abs() < 1e-9);
        assert!(qualify(&report_with_gaa(0.961), &GateConfig::default()).qualified);
        assert!(!qualify(&report_with_gaa(0.90), &GateConfig::default()).qualified);
        let mut last = false;
        for i in 0..=100 {
            let q = qualify_gaa(0.9 + i as f64 * 0.001, &GateConfig::default()).qualified;
            assert!(!last || q, "gate flipped back at step {i}");
            last = q;
        }
    }

    #[test]
    fn throughput_projection() {
        let t = ThroughputReport::project(6784, 20.0);
        assert_eq!(t.projected_seconds, 135.68);
        assert!((t.projected_minutes() - 2.26).abs() < 0.005);
        assert_eq!(ThroughputReport::project(0, 20.0).projected_seconds, 0.0);
    }

    #[test]
    fn fusion_rules() {
        let c = codec();
        let heads: Vec<Vec<f32>> = c
            .attributes
            .iter()
            .map(|(_, v)| vec![0.0; v.len()])
            .collect();
        let mut cell = vec![0.0f32; 8];
        cell[3] = 60.0;
        let r = fuse_profile("x", &cell, &heads, &c).unwrap();
        assert_eq!(r.cell_type.value, c.cell_types.decode(3).unwrap());
        assert!(r.cell_type.confidence > 0.999_999);
        let size = &r.attributes[0];
        assert_eq!(size.value, "big");
        assert_eq!(size.confidence, 0.5);
        assert_eq!(r.facets().count(), 12);
        assert_eq!(
            r.min_confidence,
            r.facets().map(|f| f.confidence).fold(1.0, f64::min)
        );
        assert_eq!(fuse_profile("x", &cell, &heads, &c).unwrap(), r);
        assert!(matches!(
            fuse_profile("x", &cell, &heads[..2], &c),
            Err(AnnotateError::Heads { .. })
        ));
    }

    #[test]
    fn dual_inference_is_order_and_thread_independent() {
        let (cnn, vit) = models();
        let pool = generate_synthetic(5, &AttributeSchema::synthetic_default(), 3, 16);
        let prep = Preprocessing {
            cnn: Pipeline::Identity,
            vit: Pipeline::Identity,
        };
        let a = dual_infer(&cnn, &vit, &pool, &prep, true).unwrap();
        let b = dual_infer(&cnn, &vit, &pool, &prep, false).unwrap();
        let strip = |o: &[DualOutput]| {
            o.iter()
                .map(|d| (d.id.clone(), d.cell_logits.clone(), d.head_logits.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a[0].head_logits.len(), 11);

        let mut reversed = pool.clone();
        reversed.reverse();
        let c = dual_infer(&cnn, &vit, &reversed, &prep, true).unwrap();
        for d in &c {
            let orig = a.iter().find(|x| x.id == d.id).unwrap();
            assert_eq!(
                (&orig.cell_logits, &orig.head_logits),
                (&d.cell_logits, &d.head_logits)
            );
        }

        let wrong = Preprocessing {
            cnn: Pipeline::Resize { size: 8 },
            vit: Pipeline::Identity,
        };
        assert!(matches!(
            dual_infer(&cnn, &vit, &pool, &wrong, true),
            Err(AnnotateError::InputSize { .. })
        ));
    }

    #[test]
    fn pool_annotation_and_gate_refusal() {
        let (cnn, vit) = models();
        let pool = generate_synthetic(6, &AttributeSchema::synthetic_default(), 4, 16);
        let mut opts = AnnotateOptions::new(&cnn, &vit);
        opts.preprocessing = Preprocessing {
            cnn: Pipeline::Identity,
            vit: Pipeline::Identity,
        };
        let closed = qualify_gaa(0.5, &GateConfig::default());
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ann");
        let mut sink = FileSink::new(&out, &codec());
        assert!(matches!(
            annotate_pool(&cnn, &vit, &pool, &codec(), &closed, &opts, &mut sink),
            Err(AnnotateError::GateRefused { .. })
        ));
        assert!(!out.exists());

        opts.override_gate = true;
        let (recs, t) =
            annotate_pool(&cnn, &vit, &pool, &codec(), &closed, &opts, &mut sink).unwrap();
        assert_eq!(recs.len(), 6);
        assert!(recs
            .iter()
            .all(|r| r.review_status == ReviewStatus::Machine && r.facets().count() == 12));
        assert_eq!(t.projected_seconds, 6.0 * 20.0 / 1000.0);
        let loaded = load_manifest(
            &out.join(ANNOTATIONS_CSV),
            &AttributeSchema::synthetic_default(),
            16,
        )
        .unwrap();
        assert_eq!(loaded.len(), 6);
        assert_eq!(
            loaded[2].cell_type.as_deref(),
            Some(recs[2].cell_type.value.as_str())
        );
        let json: Vec<AnnotationRecord> =
            serde_json::from_str(&std::fs::read_to_string(out.join(ANNOTATIONS_JSON)).unwrap())
                .unwrap();
        assert_eq!(json, recs);

        let mut empty = VecSink::default();
        let (none, t) =
            annotate_pool(&cnn, &vit, &[], &codec(), &closed, &opts, &mut empty).unwrap();
        assert!(none.is_empty());
        assert_eq!(t.projected_seconds, 0.0);
    }

    #[test]
    fn merging_reviews() {
        let c = codec();
        let schema = AttributeSchema::synthetic_default();
        let seed = generate_synthetic(3, &schema, 1, 8);
        let pool = generate_synthetic(2, &schema, 2, 8);
        let heads: Vec<Vec<f32>> = c
            .attributes
            .iter()
            .map(|(_, v)| vec![0.0; v.len()])
            .collect();
        let machine = |id: &str| fuse_profile(id, &[0.0; 8], &heads, &c).unwrap();

        let mut accepted = machine(&pool[0].id);
        assert!(matches!(
            merge_corrections(seed.clone(), &[accepted.clone()], &pool, &c),
            Err(AnnotateError::Unreviewed(_))
        ));
        accepted.review_status = ReviewStatus::Accepted;
        let merged = merge_corrections(seed.clone(), &[accepted.clone()], &pool, &c).unwrap();
        assert_eq!(merged.len(), 4);
        assert_eq!(merged[3].attributes, accepted.labels().1);
        assert_eq!(merged[3].source, Source::Pool);

        let mut corrected = machine(&pool[1].id);
        corrected.review_status = ReviewStatus::Corrected;
        corrected
            .corrected_values
            .insert("granularity".into(), "yes".into());
        let merged = merge_corrections(seed.clone(), &[corrected.clone()], &pool, &c).unwrap();
        assert_eq!(merged[3].attributes["granularity"], "yes");
        assert_eq!(
            merged[3].attributes["cell_size"],
            corrected.attributes[0].value
        );

        assert!(matches!(
            merge_corrections(
                seed.clone(),
                &[accepted.clone(), accepted.clone()],
                &pool,
                &c
            ),
            Err(AnnotateError::Duplicate(_))
        ));
        corrected
            .corrected_values
            .insert("granularity".into(), "sometimes".into());
        assert!(matches!(
            merge_corrections(seed, &[corrected], &pool, &c),
            Err(AnnotateError::Vocabulary { .. })
        ));
    }
}
