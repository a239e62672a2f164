//! Subcommands for every pipeline stage.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use cellattr_core::annotator::{
    annotate_pool, qualify_gaa, AnnotateError, AnnotateOptions, FileSink, GateConfig,
    IterationConfig, ModelVersions, RunInfo,
};
use cellattr_core::data::{
    augment_pixels, build_codec, decode_image, generate_synthetic, load_manifest, split_dataset,
    write_synthetic, AttributeSchema, DataError, Pipeline, SplitSpec,
};
use cellattr_core::explain::{grad_cam, write_overlay, CamModel, ExplainError};
use cellattr_core::metrics::MetricsReport;
use cellattr_core::models::{
    load_checkpoint, save_checkpoint, CheckpointError, Cnn, CnnConfig, Model, Vit, VitConfig,
};
use cellattr_core::trainer::{evaluate_cnn, evaluate_vit, train, TrainError};
use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::store::StoreError;
use crate::workspace::{run_next_iteration, IterateError, Workspace};

#[derive(Parser, Debug)]
#[command(
    name = "cellattr",
    version,
    about = "Blood-cell attribute annotation pipeline"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Labeled manifest CSV.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Split as `train,val,test`: fractions summing to 1, or exact counts.
    #[arg(long, default_value = "0.7,0.15,0.15")]
    pub split: String,
    /// Loop configuration JSON; desk defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint path to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the cell-type CNN.
    TrainCelltype(TrainArgs),
    /// Train the attribute ViT.
    TrainAttributes(TrainArgs),
    /// Evaluate a checkpoint on a labeled manifest.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Check a metrics report against the human baseline.
    Qualify {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0.961)]
        baseline: f64,
        #[arg(long, default_value_t = 0.015)]
        max_gap: f64,
    },
    /// Annotate an unlabeled pool with both models.
    Annotate {
        #[arg(long)]
        cnn: PathBuf,
        #[arg(long)]
        vit: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Metrics report (JSON) whose GAA is checked against the gate.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 0.961)]
        baseline: f64,
        #[arg(long, default_value_t = 0.015)]
        max_gap: f64,
        /// Annotate even when the gate is not met.
        #[arg(long)]
        override_gate: bool,
        #[arg(long, default_value_t = 20.0)]
        per_cell_ms: f64,
    },
    /// Run one bootstrap iteration in a work directory.
    Iterate {
        #[arg(long)]
        seed_manifest: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        work_dir: PathBuf,
        /// Annotate even when the gate is not met; stored in the work directory.
        #[arg(long)]
        override_gate: bool,
    },
    /// Render a Grad-CAM overlay for one image and head.
    Explain {
        /// Attribute checkpoint; use --cnn for the cell-type head instead.
        #[arg(long, required_unless_present = "cnn", conflicts_with = "cnn")]
        vit: Option<PathBuf>,
        #[arg(long)]
        cnn: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        head: String,
        /// Class value; the model's prediction when omitted.
        #[arg(long)]
        class: Option<String>,
        /// Root directory; the PNG goes to `explanations/<id>/<head>.png`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a synthetic labeled dataset.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Serve the review API over a work directory.
    Serve {
        #[arg(long)]
        work_dir: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Built review UI to serve at `/`.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
}

pub mod exit {
    pub const CONFIG: i32 = 3;
    pub const DATA: i32 = 4;
    pub const GATE: i32 = 5;
    pub const MODEL: i32 = 6;
    pub const IO: i32 = 7;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{0}")]
    Gate(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("io error: {0}")]
    Io(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Data(_) => exit::DATA,
            CliError::Gate(_) => exit::GATE,
            CliError::Model(_) => exit::MODEL,
            CliError::Io(_) => exit::IO,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Data(_)
            | TrainError::Empty(_)
            | TrainError::Unlabeled { .. }
            | TrainError::Label { .. } => CliError::Data(e.to_string()),
            TrainError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Model(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Model(e.to_string()),
        }
    }
}

impl From<AnnotateError> for CliError {
    fn from(e: AnnotateError) -> Self {
        match e {
            AnnotateError::GateRefused { .. } => CliError::Gate(e.to_string()),
            AnnotateError::Io { .. } | AnnotateError::Sink(_) => CliError::Io(e.to_string()),
            AnnotateError::Data(e) => e.into(),
            AnnotateError::Train(e) => e.into(),
            AnnotateError::Checkpoint(e) => e.into(),
            AnnotateError::Unreviewed(_)
            | AnnotateError::Duplicate(_)
            | AnnotateError::MissingImage(_)
            | AnnotateError::Vocabulary { .. } => CliError::Data(e.to_string()),
            _ => CliError::Model(e.to_string()),
        }
    }
}

impl From<ExplainError> for CliError {
    fn from(e: ExplainError) -> Self {
        match e {
            ExplainError::UnknownHead(_) | ExplainError::UnknownClass { .. } => {
                CliError::Config(e.to_string())
            }
            ExplainError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Model(e.to_string()),
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Io { .. } => CliError::Io(e.to_string()),
            StoreError::Run(e) => e.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<IterateError> for CliError {
    fn from(e: IterateError) -> Self {
        match e {
            IterateError::Store(e) => e.into(),
            IterateError::Annotate(e) => e.into(),
            IterateError::Data(e) => e.into(),
        }
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    require_file(path, what)?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{what} {}: {e}", path.display())))
}

fn load_config(path: Option<&Path>) -> Result<IterationConfig, CliError> {
    match path {
        Some(p) => read_json(p, "config"),
        None => Ok(IterationConfig::desk()),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(
        path,
        serde_json::to_string_pretty(value).expect("serializes"),
    )
    .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Parses `a,b,c` as counts when all are integers, otherwise as fractions.
pub fn parse_split(text: &str, seed: u64) -> Result<SplitSpec, CliError> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let bad = || {
        CliError::Config(format!(
            "--split expects three comma-separated values, got {text:?}"
        ))
    };
    let [a, b, c] = parts.as_slice() else {
        return Err(bad());
    };
    if let (Ok(train), Ok(val), Ok(test)) =
        (a.parse::<usize>(), b.parse::<usize>(), c.parse::<usize>())
    {
        return Ok(SplitSpec::Counts {
            train,
            val,
            test,
            seed,
        });
    }
    let f = |s: &str| s.parse::<f64>().map_err(|_| bad());
    Ok(SplitSpec::Fractions {
        train: f(a)?,
        val: f(b)?,
        test: f(c)?,
        seed,
    })
}

fn validate_split(spec: &SplitSpec) -> Result<(), CliError> {
    match spec {
        SplitSpec::Fractions { .. } => spec
            .sizes(100)
            .map(|_| ())
            .map_err(|e| CliError::Config(e.to_string())),
        SplitSpec::Counts { .. } => Ok(()),
    }
}

fn train_command(args: &TrainArgs, attributes: bool) -> Result<(), CliError> {
    let config = load_config(args.config.as_deref())?;
    let split = parse_split(&args.split, args.seed)?;
    validate_split(&split)?;
    require_file(&args.manifest, "manifest")?;
    let size = if attributes {
        config.vit.input_size
    } else {
        config.cnn.input_size
    };
    let records = load_manifest(&args.manifest, &config.schema, size)?;
    let codec = build_codec(&records, &config.schema)?;
    let (train_set, val_set, test_set) = split_dataset(records, &split)?;
    let log_path = args.out.with_extension("jsonl");
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    let report = if attributes {
        let cfg = VitConfig {
            head_specs: codec.head_specs(),
            ..config.vit.clone()
        };
        let vit = Vit::new(cfg, args.seed).map_err(|e| CliError::Config(e.to_string()))?;
        let (vit, log) = train(vit, &train_set, &val_set, &codec, &config.vit_train)?;
        log.write_jsonl(&log_path)?;
        let report = evaluate_vit(&vit, &test_set, &codec, &config.vit_train.eval_pipeline)?;
        save_checkpoint(&args.out, &Model::Vit(vit), &codec)?;
        report
    } else {
        let cfg = CnnConfig {
            num_classes: codec.cell_types.len(),
            ..config.cnn.clone()
        };
        let cnn = Cnn::new(cfg, args.seed).map_err(|e| CliError::Config(e.to_string()))?;
        let (cnn, log) = train(cnn, &train_set, &val_set, &codec, &config.cnn_train)?;
        log.write_jsonl(&log_path)?;
        let head = evaluate_cnn(&cnn, &test_set, &codec, &config.cnn_train.eval_pipeline)?;
        save_checkpoint(&args.out, &Model::Cnn(cnn), &codec)?;
        MetricsReport {
            gaa: head.accuracy,
            heads: Vec::new(),
            cell_type: Some(head),
        }
    };
    write_json(&args.out.with_extension("report.json"), &report)?;
    print!("{}", report.render_table());
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

fn evaluate_command(
    checkpoint: &Path,
    manifest: &Path,
    json: Option<&Path>,
) -> Result<(), CliError> {
    require_file(checkpoint, "checkpoint")?;
    require_file(manifest, "manifest")?;
    let ckpt = load_checkpoint(checkpoint)?;
    let schema = schema_of(&ckpt.codec);
    let report = match ckpt.model {
        Model::Vit(_) => {
            let (vit, codec) = ckpt.into_vit()?;
            let records = load_manifest(manifest, &schema, vit.config.input_size)?;
            evaluate_vit(
                &vit,
                &records,
                &codec,
                &Pipeline::vit_eval(vit.config.input_size),
            )?
        }
        Model::Cnn(_) => {
            let (cnn, codec) = ckpt.into_cnn()?;
            let records = load_manifest(manifest, &schema, cnn.config.input_size)?;
            let head = evaluate_cnn(
                &cnn,
                &records,
                &codec,
                &Pipeline::Resize {
                    size: cnn.config.input_size,
                },
            )?;
            MetricsReport {
                gaa: head.accuracy,
                heads: Vec::new(),
                cell_type: Some(head),
            }
        }
    };
    print!("{}", report.render_table());
    if let Some(path) = json {
        write_json(path, &report)?;
    }
    Ok(())
}

/// Schema equivalent to a checkpoint's codec.
fn schema_of(codec: &cellattr_core::data::LabelCodec) -> AttributeSchema {
    let attributes = codec
        .attributes
        .iter()
        .map(|(name, vocab)| cellattr_core::data::AttributeDef {
            name: name.clone(),
            values: vocab.values().to_vec(),
        })
        .collect();
    AttributeSchema::new(codec.cell_types.values().to_vec(), attributes)
        .expect("codec vocabularies are valid")
}

fn gate_message(gate: &cellattr_core::annotator::QualificationGate) -> String {
    format!(
        "GAA {:.2}% vs baseline {:.2}%: gap {:.2}% (max {:.2}%) -> {}",
        gate.measured_gaa * 100.0,
        gate.human_baseline * 100.0,
        gate.gap_points(),
        gate.max_gap * 100.0,
        if gate.qualified {
            "qualified"
        } else {
            "not qualified"
        }
    )
}

fn qualify_command(report: &Path, baseline: f64, max_gap: f64) -> Result<(), CliError> {
    let report: MetricsReport = read_json(report, "report")?;
    let gate = qualify_gaa(
        report.gaa,
        &GateConfig {
            human_baseline: baseline,
            max_gap,
        },
    );
    println!("{}", gate_message(&gate));
    if gate.qualified {
        Ok(())
    } else {
        Err(CliError::Gate("gate not met".into()))
    }
}

#[allow(clippy::too_many_arguments)]
fn annotate_command(
    cnn: &Path,
    vit: &Path,
    pool: &Path,
    out_dir: &Path,
    report: Option<&Path>,
    gate_config: GateConfig,
    override_gate: bool,
    per_cell_ms: f64,
) -> Result<(), CliError> {
    for (p, what) in [
        (cnn, "cnn checkpoint"),
        (vit, "vit checkpoint"),
        (pool, "pool manifest"),
    ] {
        require_file(p, what)?;
    }
    let measured = match report {
        Some(r) => read_json::<MetricsReport>(r, "report")?.gaa,
        None => f64::NEG_INFINITY,
    };
    let gate = qualify_gaa(measured, &gate_config);
    if !gate.qualified && !override_gate {
        let why = if report.is_some() {
            gate_message(&gate)
        } else {
            "no --report given to qualify against".to_string()
        };
        return Err(CliError::Gate(format!(
            "annotation refused: {why}; pass --override-gate to proceed"
        )));
    }
    let cnn_ckpt = load_checkpoint(cnn)?;
    let vit_ckpt = load_checkpoint(vit)?;
    let versions = ModelVersions {
        cnn: cnn_ckpt.id().to_string(),
        vit: vit_ckpt.id().to_string(),
    };
    let (cnn_model, cnn_codec) = cnn_ckpt.into_cnn()?;
    let (vit_model, vit_codec) = vit_ckpt.into_vit()?;
    let codec = cellattr_core::data::LabelCodec {
        cell_types: cnn_codec.cell_types,
        attributes: vit_codec.attributes,
    };
    let records = load_manifest(
        pool,
        &schema_of(&codec),
        vit_model.config.input_size.max(cnn_model.config.input_size),
    )?;
    let mut options = AnnotateOptions::new(&cnn_model, &vit_model);
    options.override_gate = override_gate;
    options.per_cell_ms = per_cell_ms;
    options.versions = versions;
    let mut sink = FileSink::new(out_dir, &codec);
    let (annotations, throughput) = annotate_pool(
        &cnn_model, &vit_model, &records, &codec, &gate, &options, &mut sink,
    )?;
    RunInfo {
        iteration: 0,
        cnn_checkpoint: std::fs::canonicalize(cnn).unwrap_or_else(|_| cnn.to_path_buf()),
        vit_checkpoint: std::fs::canonicalize(vit).unwrap_or_else(|_| vit.to_path_buf()),
        codec,
        preprocessing: options.preprocessing,
        gate,
        gaa: report.map(|_| measured),
        throughput: Some(throughput.clone()),
    }
    .save(out_dir)?;
    println!(
        "annotated {} images; projected {:.2} s at {} ms/cell, measured {:.2} s",
        annotations.len(),
        throughput.projected_seconds,
        throughput.per_cell_ms,
        throughput.measured_seconds.unwrap_or(0.0)
    );
    Ok(())
}

fn iterate_command(
    seed: &Path,
    pool: &Path,
    config: Option<&Path>,
    work_dir: &Path,
    override_gate: bool,
) -> Result<(), CliError> {
    if !Workspace::exists(work_dir) {
        let mut config = load_config(config)?;
        config.override_gate |= override_gate;
        require_file(seed, "seed manifest")?;
        require_file(pool, "pool manifest")?;
        let abs = |p: &Path| {
            std::fs::canonicalize(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
        };
        Workspace {
            seed_manifest: abs(seed)?,
            pool_manifest: abs(pool)?,
            image_size: config.vit.input_size.max(config.cnn.input_size),
            config,
        }
        .save(work_dir)?;
    } else if override_gate {
        let mut workspace = Workspace::load(work_dir)?;
        workspace.config.override_gate = true;
        workspace.save(work_dir)?;
    }
    let outcome = run_next_iteration(work_dir)?;
    print!("{}", outcome.report.render_table());
    println!("{}", gate_message(&outcome.gate));
    println!(
        "iteration {} written to {}: {} annotations",
        outcome.iteration,
        outcome.dir.display(),
        outcome.annotations.len()
    );
    Ok(())
}

fn explain_command(
    checkpoint: &Path,
    image: &Path,
    head: &str,
    class: Option<&str>,
    out: &Path,
) -> Result<(), CliError> {
    require_file(checkpoint, "checkpoint")?;
    require_file(image, "image")?;
    let bytes =
        std::fs::read(image).map_err(|e| CliError::Io(format!("{}: {e}", image.display())))?;
    let pixels = decode_image(&bytes)?;
    let id = image
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image")
        .to_string();
    let ckpt = load_checkpoint(checkpoint)?;
    let (model, codec, pipeline): (Box<dyn CamModel>, _, _) = match ckpt.model {
        Model::Vit(_) => {
            let (vit, codec) = ckpt.into_vit()?;
            let p = Pipeline::vit_eval(vit.config.input_size);
            (Box::new(vit), codec, p)
        }
        Model::Cnn(_) => {
            let (cnn, codec) = ckpt.into_cnn()?;
            let p = Pipeline::Resize {
                size: cnn.config.input_size,
            };
            (Box::new(cnn), codec, p)
        }
    };
    let input = augment_pixels(&pixels, &id, &pipeline, 0, 0)?;
    let vocab = if head == "cell_type" {
        Some(&codec.cell_types)
    } else {
        codec.attribute(head)
    }
    .ok_or_else(|| CliError::Config(format!("unknown head `{head}`")))?;
    let class = match class {
        Some(v) => vocab
            .encode(v)
            .ok_or_else(|| CliError::Config(format!("`{v}` is not a value of {head}")))?,
        None => predicted_class(model.as_ref(), &input, head)?,
    };
    let map = grad_cam(model.as_ref(), &input, &id, head, class)?;
    let path = write_overlay(out, &map, &input)?;
    println!(
        "{} ({head} = {})",
        path.display(),
        vocab.decode(class).unwrap_or("?")
    );
    Ok(())
}

fn predicted_class(
    model: &dyn CamModel,
    input: &cellattr_core::tensor::Tensor,
    head: &str,
) -> Result<usize, CliError> {
    let tape: cellattr_core::tensor::Tape = cellattr_core::tensor::Tape::new();
    let s = model.cam_input_size();
    let x = tape.constant(
        input
            .reshape([1, 3, s, s])
            .map_err(|e| CliError::Model(e.to_string()))?,
    );
    let fwd = model.cam_forward(&tape, x)?;
    let index = model
        .cam_heads()
        .iter()
        .position(|(n, _)| n == head)
        .ok_or_else(|| CliError::Config(format!("unknown head `{head}`")))?;
    let logits = tape.value(fwd.logits[index]);
    let mut best = 0;
    for (i, v) in logits.data().iter().enumerate() {
        if *v > logits.data()[best] {
            best = i;
        }
    }
    Ok(best)
}

fn synth_command(count: usize, seed: u64, out_dir: &Path, size: usize) -> Result<(), CliError> {
    if size == 0 {
        return Err(CliError::Config("--size must be positive".into()));
    }
    let records = generate_synthetic(count, &AttributeSchema::synthetic_default(), seed, size);
    write_synthetic(out_dir, &records)?;
    println!("wrote {count} images to {}", out_dir.display());
    Ok(())
}

fn serve_command(
    work_dir: &Path,
    host: &str,
    port: u16,
    ui_dir: Option<PathBuf>,
) -> Result<(), CliError> {
    if !work_dir.is_dir() {
        return Err(CliError::Data(format!(
            "work directory {} does not exist",
            work_dir.display()
        )));
    }
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| CliError::Config(format!("bad address {host}:{port}: {e}")))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Io(e.to_string()))?;
    runtime
        .block_on(crate::api::serve(work_dir, addr, ui_dir))
        .map_err(|e| CliError::Io(e.to_string()))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::TrainCelltype(args) => train_command(&args, false),
        Command::TrainAttributes(args) => train_command(&args, true),
        Command::Evaluate {
            checkpoint,
            manifest,
            json,
        } => evaluate_command(&checkpoint, &manifest, json.as_deref()),
        Command::Qualify {
            report,
            baseline,
            max_gap,
        } => qualify_command(&report, baseline, max_gap),
        Command::Annotate {
            cnn,
            vit,
            pool,
            out_dir,
            report,
            baseline,
            max_gap,
            override_gate,
            per_cell_ms,
        } => annotate_command(
            &cnn,
            &vit,
            &pool,
            &out_dir,
            report.as_deref(),
            GateConfig {
                human_baseline: baseline,
                max_gap,
            },
            override_gate,
            per_cell_ms,
        ),
        Command::Iterate {
            seed_manifest,
            pool,
            config,
            work_dir,
            override_gate,
        } => iterate_command(
            &seed_manifest,
            &pool,
            config.as_deref(),
            &work_dir,
            override_gate,
        ),
        Command::Explain {
            vit,
            cnn,
            image,
            head,
            class,
            out,
        } => {
            let checkpoint = vit.or(cnn).expect("clap requires one checkpoint");
            explain_command(&checkpoint, &image, &head, class.as_deref(), &out)
        }
        Command::Synth {
            count,
            seed,
            out_dir,
            size,
        } => synth_command(count, seed, &out_dir, size),
        Command::Serve {
            work_dir,
            port,
            host,
            ui_dir,
        } => serve_command(&work_dir, &host, port, ui_dir),
    }
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main() -> i32 {
    match run(Cli::parse()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}
