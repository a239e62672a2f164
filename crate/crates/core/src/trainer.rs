//! Training and evaluation loops for both models.

use std::io::Write as _;
use std::path::Path;
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{augment_pixels, DataError, ImageRecord, LabelCodec, Pipeline};
use crate::metrics::{report, HeadMetrics, MetricsError, MetricsReport};
use crate::models::{Bound, Cnn, ModelError, Params, Vit};
use crate::tensor::{Element, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} set is empty")]
    Empty(&'static str),
    #[error("record {id} lacks a label for {facet}")]
    Unlabeled { id: String, facet: String },
    #[error("record {id}: value {value:?} for {facet} is not in the codec")]
    Label {
        id: String,
        facet: String,
        value: String,
    },
    #[error("{groups} logit groups, {targets} target lists, {weights} weights")]
    Arity {
        groups: usize,
        targets: usize,
        weights: usize,
    },
    #[error("record {id}: preprocessed to {found:?}, model expects {expected}×{expected}")]
    InputSize {
        id: String,
        found: Vec<usize>,
        expected: usize,
    },
    #[error("non-finite loss at epoch {0}")]
    Diverged(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; `None` runs
    /// every epoch.
    #[serde(default)]
    pub early_stop_patience: Option<usize>,
    /// Per-head loss weights; uniform when absent.
    #[serde(default)]
    pub head_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub cosine_decay: bool,
    /// Stop once the validation metric reaches this value.
    #[serde(default)]
    pub target_metric: Option<f64>,
    pub train_pipeline: Pipeline,
    pub eval_pipeline: Pipeline,
}

fn default_momentum() -> f64 {
    0.9
}

impl TrainConfig {
    /// Adam at 1e-3 with the transformer augmentation pipelines.
    pub fn vit_default(input_size: usize) -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            momentum: default_momentum(),
            seed: 0,
            early_stop_patience: Some(10),
            head_weights: None,
            cosine_decay: false,
            target_metric: None,
            train_pipeline: Pipeline::vit_train(input_size),
            eval_pipeline: Pipeline::vit_eval(input_size),
        }
    }

    /// Adam at 1e-3 with shear/zoom augmentation.
    pub fn cnn_default(input_size: usize) -> Self {
        Self {
            train_pipeline: Pipeline::pbc_train(input_size),
            eval_pipeline: Pipeline::Resize { size: input_size },
            ..Self::vit_default(input_size)
        }
    }

    pub fn validate(&self, heads: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.early_stop_patience == Some(0) {
            return bad("early_stop_patience must be positive".into());
        }
        if let Some(w) = &self.head_weights {
            if w.len() != heads || w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return bad(format!("{} head weights for {heads} heads", w.len()));
            }
        }
        Ok(())
    }

    fn weights(&self, heads: usize) -> Vec<f64> {
        self.head_weights
            .clone()
            .unwrap_or_else(|| vec![1.0; heads])
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        if self.cosine_decay {
            self.learning_rate
                * 0.5
                * (1.0 + (std::f64::consts::PI * epoch as f64 / self.epochs as f64).cos())
        } else {
            self.learning_rate
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Accuracy for the cell-type model, GAA for the attribute model.
    pub val_metric: f64,
    pub metric: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainLog {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("epoch serializes") + "\n")
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), TrainError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    /// Whether training loss never rises after the first tenth of the run.
    pub fn loss_settles(&self) -> bool {
        let skip = self.epochs.len().div_ceil(10);
        self.epochs[skip.min(self.epochs.len())..]
            .windows(2)
            .all(|w| w[1].train_loss <= w[0].train_loss)
    }
}

/// `Σ wᵢ · cross_entropy(logitsᵢ, targetsᵢ)`.
pub fn multi_head_loss<T: Element>(
    tape: &Tape<T>,
    logits: &[Var],
    targets: &[Vec<usize>],
    weights: &[f64],
) -> Result<Var, TrainError> {
    if logits.len() != targets.len() || logits.len() != weights.len() || logits.is_empty() {
        return Err(TrainError::Arity {
            groups: logits.len(),
            targets: targets.len(),
            weights: weights.len(),
        });
    }
    let mut total: Option<Var> = None;
    for ((&l, t), &w) in logits.iter().zip(targets).zip(weights) {
        let ce = tape.cross_entropy(l, t)?;
        let term = if w == 1.0 {
            ce
        } else {
            tape.scale(ce, T::of(w))
        };
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.expect("at least one head"))
}

/// What the training loop needs from a model.
pub trait Trainable: Clone + Send + Sync {
    fn params(&self) -> &Params;
    fn params_mut(&mut self) -> &mut Params;
    fn input_size(&self) -> usize;
    /// Class names per head.
    fn heads(&self, codec: &LabelCodec) -> Vec<(String, Vec<String>)>;
    /// Label index per head for one record.
    fn targets(&self, record: &ImageRecord, codec: &LabelCodec) -> Result<Vec<usize>, TrainError>;
    /// Logit vars per head.
    fn logits(&self, tape: &Tape, bound: &Bound, x: Var) -> Result<Vec<Var>, TrainError>;
    /// Name of the validation metric.
    fn metric_name(&self) -> &'static str;
}

fn encode(
    codec_vocab: &crate::data::Vocab,
    id: &str,
    facet: &str,
    value: Option<&String>,
) -> Result<usize, TrainError> {
    let value = value.ok_or_else(|| TrainError::Unlabeled {
        id: id.to_string(),
        facet: facet.to_string(),
    })?;
    codec_vocab.encode(value).ok_or_else(|| TrainError::Label {
        id: id.to_string(),
        facet: facet.to_string(),
        value: value.clone(),
    })
}

impl Trainable for Cnn {
    fn params(&self) -> &Params {
        &self.params
    }
    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }
    fn input_size(&self) -> usize {
        self.config.input_size
    }
    fn heads(&self, codec: &LabelCodec) -> Vec<(String, Vec<String>)> {
        vec![("cell_type".into(), codec.cell_types.values().to_vec())]
    }
    fn targets(&self, record: &ImageRecord, codec: &LabelCodec) -> Result<Vec<usize>, TrainError> {
        Ok(vec![encode(
            &codec.cell_types,
            &record.id,
            "cell_type",
            record.cell_type.as_ref(),
        )?])
    }
    fn logits(&self, tape: &Tape, bound: &Bound, x: Var) -> Result<Vec<Var>, TrainError> {
        Ok(vec![self.forward(tape, bound, x)?.logits])
    }
    fn metric_name(&self) -> &'static str {
        "accuracy"
    }
}

impl Trainable for Vit {
    fn params(&self) -> &Params {
        &self.params
    }
    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }
    fn input_size(&self) -> usize {
        self.config.input_size
    }
    fn heads(&self, codec: &LabelCodec) -> Vec<(String, Vec<String>)> {
        codec
            .attributes
            .iter()
            .map(|(n, v)| (n.clone(), v.values().to_vec()))
            .collect()
    }
    fn targets(&self, record: &ImageRecord, codec: &LabelCodec) -> Result<Vec<usize>, TrainError> {
        codec
            .attributes
            .iter()
            .map(|(name, vocab)| encode(vocab, &record.id, name, record.attributes.get(name)))
            .collect()
    }
    fn logits(&self, tape: &Tape, bound: &Bound, x: Var) -> Result<Vec<Var>, TrainError> {
        Ok(self.forward(tape, bound, x)?.logits)
    }
    fn metric_name(&self) -> &'static str {
        "gaa"
    }
}

fn check_heads<M: Trainable>(model: &M, codec: &LabelCodec) -> Result<(), TrainError> {
    let tape = Tape::new();
    let bound = model.params().bind(&tape, false);
    let s = model.input_size();
    let x = tape.constant(Tensor::zeros([1, 3, s, s]));
    let logits = model.logits(&tape, &bound, x)?;
    let heads = model.heads(codec);
    let shapes: Vec<usize> = logits.iter().map(|&l| tape.shape(l)[1]).collect();
    let expected: Vec<usize> = heads.iter().map(|(_, c)| c.len()).collect();
    if shapes != expected {
        return Err(TrainError::Config(format!(
            "model heads {shapes:?} do not match codec class counts {expected:?}"
        )));
    }
    Ok(())
}

/// Stacks preprocessed images into `[B, 3, S, S]` and transposes labels to
/// one index list per head.
fn make_batch<M: Trainable>(
    model: &M,
    records: &[&ImageRecord],
    codec: &LabelCodec,
    pipeline: &Pipeline,
    epoch: u64,
    seed: u64,
) -> Result<(Tensor, Vec<Vec<usize>>), TrainError> {
    let s = model.input_size();
    let mut data = Vec::with_capacity(records.len() * 3 * s * s);
    let mut targets: Vec<Vec<usize>> = Vec::new();
    for r in records {
        let px = augment_pixels(&r.pixels, &r.id, pipeline, epoch, seed)?;
        if px.shape() != [3, s, s] {
            return Err(TrainError::InputSize {
                id: r.id.clone(),
                found: px.shape().to_vec(),
                expected: s,
            });
        }
        data.extend_from_slice(px.data());
        let t = model.targets(r, codec)?;
        if targets.is_empty() {
            targets = vec![Vec::with_capacity(records.len()); t.len()];
        }
        for (head, v) in targets.iter_mut().zip(t) {
            head.push(v);
        }
    }
    Ok((Tensor::new([records.len(), 3, s, s], data)?, targets))
}

struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    step: i32,
}

impl Optimizer {
    fn new(kind: OptimizerKind, momentum: f64, params: &Params) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, t)| vec![0.0f32; t.numel()])
                .collect::<Vec<_>>()
        };
        Self {
            kind,
            momentum,
            first: zeros(),
            second: if kind == OptimizerKind::Adam {
                zeros()
            } else {
                Vec::new()
            },
            step: 0,
        }
    }

    fn apply(&mut self, params: &mut Params, grads: &[Option<Vec<f32>>], lr: f64) {
        self.step += 1;
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let data = p.data_mut();
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    let v = &mut self.first[i];
                    for ((w, &gi), vi) in data.iter_mut().zip(g).zip(v.iter_mut()) {
                        *vi = (self.momentum * *vi as f64 + gi as f64) as f32;
                        *w = (*w as f64 - lr * *vi as f64) as f32;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (j, (w, &gi)) in data.iter_mut().zip(g).enumerate() {
                        let gi = gi as f64;
                        let mj = b1 * m[j] as f64 + (1.0 - b1) * gi;
                        let vj = b2 * v[j] as f64 + (1.0 - b2) * gi * gi;
                        m[j] = mj as f32;
                        v[j] = vj as f32;
                        *w = (*w as f64 - lr * (mj / c1) / ((vj / c2).sqrt() + eps)) as f32;
                    }
                }
            }
        }
    }
}

/// Per-head predictions and labels over a dataset, plus the mean loss.
pub struct Predictions {
    pub heads: Vec<(String, Vec<String>)>,
    pub predicted: Vec<Vec<usize>>,
    pub labels: Vec<Vec<usize>>,
    pub loss: f64,
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Runs the model over labeled records with the given (evaluation)
/// pipeline. Epoch 0 and the config seed fix any pipeline randomness.
pub fn predict_dataset<M: Trainable>(
    model: &M,
    records: &[ImageRecord],
    codec: &LabelCodec,
    pipeline: &Pipeline,
    batch_size: usize,
    weights: Option<&[f64]>,
) -> Result<Predictions, TrainError> {
    let heads = model.heads(codec);
    let uniform = vec![1.0; heads.len()];
    let weights = weights.unwrap_or(&uniform);
    let mut predicted = vec![Vec::with_capacity(records.len()); heads.len()];
    let mut labels = vec![Vec::with_capacity(records.len()); heads.len()];
    let mut loss_sum = 0.0;
    let refs: Vec<&ImageRecord> = records.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let (x, targets) = make_batch(model, chunk, codec, pipeline, 0, 0)?;
        let tape = Tape::new();
        let bound = model.params().bind(&tape, false);
        let xv = tape.constant(x);
        let logits = model.logits(&tape, &bound, xv)?;
        let loss = multi_head_loss(&tape, &logits, &targets, weights)?;
        loss_sum += tape.value(loss).data()[0] as f64 * chunk.len() as f64;
        for (h, &l) in logits.iter().enumerate() {
            let value = tape.value(l);
            let k = value.shape()[1];
            predicted[h].extend(value.data().chunks(k).map(argmax));
            labels[h].extend_from_slice(&targets[h]);
        }
    }
    Ok(Predictions {
        heads,
        predicted,
        labels,
        loss: loss_sum / records.len().max(1) as f64,
    })
}

/// Attribute-model evaluation: one head per attribute plus GAA.
pub fn evaluate_vit(
    model: &Vit,
    records: &[ImageRecord],
    codec: &LabelCodec,
    pipeline: &Pipeline,
) -> Result<MetricsReport, TrainError> {
    if records.is_empty() {
        return Err(TrainError::Empty("evaluation"));
    }
    let p = predict_dataset(model, records, codec, pipeline, 32, None)?;
    Ok(report(&p.predicted, &p.labels, codec)?)
}

/// Cell-type evaluation.
pub fn evaluate_cnn(
    model: &Cnn,
    records: &[ImageRecord],
    codec: &LabelCodec,
    pipeline: &Pipeline,
) -> Result<HeadMetrics, TrainError> {
    if records.is_empty() {
        return Err(TrainError::Empty("evaluation"));
    }
    let p = predict_dataset(model, records, codec, pipeline, 32, None)?;
    Ok(HeadMetrics::score(
        "cell_type",
        codec.cell_types.values(),
        &p.labels[0],
        &p.predicted[0],
    )?)
}

fn validation_metric(p: &Predictions) -> f64 {
    let accs: Vec<f64> = p
        .predicted
        .iter()
        .zip(&p.labels)
        .map(|(pr, la)| {
            pr.iter().zip(la).filter(|(a, b)| a == b).count() as f64 / la.len().max(1) as f64
        })
        .collect();
    accs.iter().sum::<f64>() / accs.len().max(1) as f64
}

/// Trains `model` and returns the parameters from the best validation
/// epoch. Shuffling and augmentation are seeded, so the result depends only
/// on the inputs. Batches are prepared on a worker thread one step ahead.
pub fn train<M: Trainable>(
    model: M,
    train_set: &[ImageRecord],
    val_set: &[ImageRecord],
    codec: &LabelCodec,
    config: &TrainConfig,
) -> Result<(M, TrainLog), TrainError> {
    let heads = model.heads(codec).len();
    config.validate(heads)?;
    if train_set.is_empty() {
        return Err(TrainError::Empty("training"));
    }
    if val_set.is_empty() {
        return Err(TrainError::Empty("validation"));
    }
    check_heads(&model, codec)?;
    for r in train_set.iter().chain(val_set) {
        model.targets(r, codec)?;
    }
    let weights = config.weights(heads);
    let mut model = model;
    let mut optimizer = Optimizer::new(config.optimizer, config.momentum, model.params());
    let mut best: Option<(f64, M)> = None;
    let mut log = TrainLog::default();
    let mut since_best = 0;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(
            config.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9),
        ));
        let lr = config.lr_at(epoch);
        let mut loss_sum = 0.0;

        std::thread::scope(|scope| -> Result<(), TrainError> {
            let (tx, rx) = sync_channel(2);
            let producer_model = model.clone();
            let order = &order;
            scope.spawn(move || {
                for chunk in order.chunks(config.batch_size) {
                    let recs: Vec<&ImageRecord> = chunk.iter().map(|&i| &train_set[i]).collect();
                    let batch = make_batch(
                        &producer_model,
                        &recs,
                        codec,
                        &config.train_pipeline,
                        epoch as u64,
                        config.seed,
                    );
                    if tx.send((batch, recs.len())).is_err() {
                        break;
                    }
                }
            });
            for (batch, count) in rx {
                let (x, targets) = batch?;
                let tape = Tape::new();
                let bound = model.params().bind(&tape, true);
                let xv = tape.constant(x);
                let logits = model.logits(&tape, &bound, xv)?;
                let loss = multi_head_loss(&tape, &logits, &targets, &weights)?;
                let value = tape.value(loss).data()[0] as f64;
                if !value.is_finite() {
                    return Err(TrainError::Diverged(epoch));
                }
                loss_sum += value * count as f64;
                let vars = bound.vars().to_vec();
                let grads = tape.backward(loss)?;
                let grads: Vec<Option<Vec<f32>>> = vars
                    .iter()
                    .map(|&v| grads.wrt(v).map(<[f32]>::to_vec))
                    .collect();
                optimizer.apply(model.params_mut(), &grads, lr);
            }
            Ok(())
        })?;

        let val = predict_dataset(
            &model,
            val_set,
            codec,
            &config.eval_pipeline,
            config.batch_size,
            Some(&weights),
        )?;
        let metric = validation_metric(&val);
        log.epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss: val.loss,
            val_metric: metric,
            metric: model.metric_name().to_string(),
            seconds: started.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|(m, _)| metric > *m) {
            best = Some((metric, model.clone()));
            log.best_epoch = epoch;
            since_best = 0;
            if config.target_metric.is_some_and(|t| metric >= t) {
                break;
            }
        } else {
            since_best += 1;
            if config.early_stop_patience.is_some_and(|p| since_best >= p) {
                log.stopped_early = true;
                break;
            }
        }
    }
    let (_, best_model) = best.expect("at least one epoch");
    Ok((best_model, log))
}
