use serde::{Deserialize, Serialize};

use super::{check_input, Bound, Init, ModelError, Params};
use crate::tensor::{Element, Tape, Tensor, Var};

/// VGG-style classifier: blocks of 3×3 same-padded convs with relu, each
/// block followed by a 2×2 max-pool, then fully connected layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub input_size: usize,
    /// `(channels, conv_count)` per block.
    pub conv_blocks: Vec<(usize, usize)>,
    pub fc_dims: Vec<usize>,
    pub num_classes: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            conv_blocks: vec![(16, 2), (32, 2), (64, 2)],
            fc_dims: vec![128],
            num_classes: 8,
        }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.conv_blocks.is_empty() || self.conv_blocks.iter().any(|&(c, n)| c == 0 || n == 0) {
            return bad(format!(
                "conv blocks {:?} must be non-empty with positive entries",
                self.conv_blocks
            ));
        }
        let factor = 1usize << self.conv_blocks.len();
        if self.input_size == 0 || !self.input_size.is_multiple_of(factor) {
            return bad(format!(
                "input size {} not divisible by 2^{}",
                self.input_size,
                self.conv_blocks.len()
            ));
        }
        if self.num_classes == 0 || self.fc_dims.contains(&0) {
            return bad("class count and fc widths must be positive".into());
        }
        Ok(())
    }

    /// Spatial side of the last feature map before flattening.
    pub fn final_side(&self) -> usize {
        self.input_size >> self.conv_blocks.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cnn<T = f32> {
    pub config: CnnConfig,
    pub params: Params<T>,
}

pub struct CnnOutput {
    /// `[N, num_classes]`.
    pub logits: Var,
    /// Activation of the last conv layer, `[N, C, s, s]`, before pooling.
    pub features: Var,
}

impl<T: Element> Cnn<T> {
    pub fn new(config: CnnConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut init = Init::new(seed);
        let mut params = Params::new();
        let mut channels = 3;
        for (b, &(out, count)) in config.conv_blocks.iter().enumerate() {
            for i in 0..count {
                params.push(
                    format!("block{b}.conv{i}.weight"),
                    init.he(&[out, channels, 3, 3], channels * 9),
                );
                params.push(format!("block{b}.conv{i}.bias"), Tensor::zeros([out]));
                channels = out;
            }
        }
        let mut width = channels * config.final_side().pow(2);
        for (i, &dim) in config.fc_dims.iter().enumerate() {
            params.push(format!("fc{i}.weight"), init.he(&[width, dim], width));
            params.push(format!("fc{i}.bias"), Tensor::zeros([dim]));
            width = dim;
        }
        params.push(
            "classifier.weight",
            init.he(&[width, config.num_classes], width),
        );
        params.push("classifier.bias", Tensor::zeros([config.num_classes]));
        Ok(Self { config, params })
    }

    pub fn forward(&self, tape: &Tape<T>, bound: &Bound, x: Var) -> Result<CnnOutput, ModelError> {
        let n = check_input("cnn_forward", &tape.shape(x), self.config.input_size)?;
        let mut h = x;
        let mut features = x;
        let last = self.config.conv_blocks.len() - 1;
        for (b, &(_, count)) in self.config.conv_blocks.iter().enumerate() {
            for i in 0..count {
                h = tape.conv2d(h, bound.get(&format!("block{b}.conv{i}.weight")), 1, 1)?;
                h = tape.add_channel_bias(h, bound.get(&format!("block{b}.conv{i}.bias")))?;
                h = tape.relu(h);
            }
            if b == last {
                features = h;
            }
            h = tape.max_pool2d(h, 2, 2)?;
        }
        let width = tape.value(h).numel() / n;
        h = tape.reshape(h, &[n, width])?;
        for i in 0..self.config.fc_dims.len() {
            h = tape.linear(
                h,
                bound.get(&format!("fc{i}.weight")),
                bound.get(&format!("fc{i}.bias")),
            )?;
            h = tape.relu(h);
        }
        let logits = tape.linear(
            h,
            bound.get("classifier.weight"),
            bound.get("classifier.bias"),
        )?;
        Ok(CnnOutput { logits, features })
    }

    /// Logits `[N, num_classes]` without gradient tracking.
    pub fn infer(&self, batch: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let x = tape.constant(batch.clone());
        let out = self.forward(&tape, &bound, x)?;
        Ok((*tape.value(out.logits)).clone())
    }

    pub fn cast<U: Element>(&self) -> Cnn<U> {
        Cnn {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}
