#![allow(dead_code)]

use std::path::Path;

use cellattr_core::annotator::{
    annotate_pool, qualify_gaa, AnnotateOptions, FileSink, GateConfig, IterationConfig,
    Preprocessing, RunInfo,
};
use cellattr_core::data::{
    generate_synthetic, write_synthetic, AttributeSchema, LabelCodec, Pipeline, SplitSpec,
};
use cellattr_core::models::{save_checkpoint, Cnn, CnnConfig, Model, Vit, VitConfig};
use cellattr_core::trainer::{OptimizerKind, TrainConfig};

pub fn codec() -> LabelCodec {
    LabelCodec::from_schema(&AttributeSchema::synthetic_default()).unwrap()
}

pub fn tiny_models() -> (Cnn, Vit) {
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

/// Annotation output for three synthetic images with the given minimum
/// confidences, as `annotate` would leave it.
pub fn annotated_dir(dir: &Path, min_confidences: &[f64]) {
    let (cnn, vit) = tiny_models();
    let codec = codec();
    let pool = generate_synthetic(
        min_confidences.len(),
        &AttributeSchema::synthetic_default(),
        11,
        16,
    );
    let ckpt = dir.join("models");
    std::fs::create_dir_all(&ckpt).unwrap();
    save_checkpoint(&ckpt.join("cnn.ckpt"), &Model::Cnn(cnn.clone()), &codec).unwrap();
    save_checkpoint(&ckpt.join("vit.ckpt"), &Model::Vit(vit.clone()), &codec).unwrap();
    let gate = qualify_gaa(0.95, &GateConfig::default());
    let mut options = AnnotateOptions::new(&cnn, &vit);
    options.preprocessing = Preprocessing {
        cnn: Pipeline::Identity,
        vit: Pipeline::Identity,
    };
    let mut sink = FileSink::new(dir, &codec);
    let (mut records, throughput) =
        annotate_pool(&cnn, &vit, &pool, &codec, &gate, &options, &mut sink).unwrap();
    for (r, &m) in records.iter_mut().zip(min_confidences) {
        r.min_confidence = m;
    }
    std::fs::write(
        dir.join("annotations.json"),
        serde_json::to_string(&records).unwrap(),
    )
    .unwrap();
    RunInfo {
        iteration: 0,
        cnn_checkpoint: ckpt.join("cnn.ckpt"),
        vit_checkpoint: ckpt.join("vit.ckpt"),
        codec,
        preprocessing: options.preprocessing,
        gate,
        gaa: Some(0.95),
        throughput: Some(throughput),
    }
    .save(dir)
    .unwrap();
}

/// Loop configuration small enough to train in seconds.
pub fn tiny_config() -> IterationConfig {
    let train = TrainConfig {
        epochs: 2,
        batch_size: 8,
        learning_rate: 1e-3,
        optimizer: OptimizerKind::Adam,
        momentum: 0.9,
        seed: 0,
        early_stop_patience: None,
        head_weights: None,
        cosine_decay: false,
        target_metric: None,
        train_pipeline: Pipeline::Identity,
        eval_pipeline: Pipeline::Identity,
    };
    let (cnn, vit) = tiny_models();
    IterationConfig {
        schema: AttributeSchema::synthetic_default(),
        split: SplitSpec::Fractions {
            train: 0.6,
            val: 0.2,
            test: 0.2,
            seed: 3,
        },
        cnn: cnn.config,
        vit: vit.config,
        cnn_train: train.clone(),
        vit_train: train,
        gate: GateConfig {
            human_baseline: 0.961,
            max_gap: 1.0,
        },
        per_cell_ms: 20.0,
        override_gate: false,
        model_seed: 0,
    }
}

/// Writes seed and pool manifests of synthetic images.
pub fn seed_and_pool(
    root: &Path,
    seed: usize,
    pool: usize,
) -> (std::path::PathBuf, std::path::PathBuf) {
    let schema = AttributeSchema::synthetic_default();
    write_synthetic(
        &root.join("seed"),
        &generate_synthetic(seed, &schema, 1, 16),
    )
    .unwrap();
    write_synthetic(
        &root.join("pool"),
        &generate_synthetic(pool, &schema, 2, 16),
    )
    .unwrap();
    (
        root.join("seed/manifest.csv"),
        root.join("pool/manifest.csv"),
    )
}
