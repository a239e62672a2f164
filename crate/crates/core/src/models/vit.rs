use serde::{Deserialize, Serialize};

use super::{check_input, Bound, Init, ModelError, Params};
use crate::tensor::{Element, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Pre-norm vision transformer with a class token and one linear head per
/// attribute reading the final class-token representation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub input_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    /// `(attribute name, class count)` in head order.
    pub head_specs: Vec<(String, usize)>,
}

impl VitConfig {
    /// Desk-scale defaults bound to the given heads.
    pub fn desk(head_specs: Vec<(String, usize)>) -> Self {
        Self {
            input_size: 64,
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 2.0,
            head_specs,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.patch_size == 0
            || self.input_size == 0
            || !self.input_size.is_multiple_of(self.patch_size)
        {
            return bad(format!(
                "input size {} not divisible by patch size {}",
                self.input_size, self.patch_size
            ));
        }
        if self.num_heads == 0
            || self.embed_dim == 0
            || !self.embed_dim.is_multiple_of(self.num_heads)
        {
            return bad(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            ));
        }
        if self.depth == 0 || self.mlp_hidden() == 0 {
            return bad("depth and mlp width must be positive".into());
        }
        if self.head_specs.is_empty() || self.head_specs.iter().any(|(_, k)| *k == 0) {
            return bad(format!(
                "head specs {:?} must be non-empty with positive counts",
                self.head_specs
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size
    }

    /// Patch tokens plus the class token.
    pub fn tokens(&self) -> usize {
        self.grid().pow(2) + 1
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vit<T = f32> {
    pub config: VitConfig,
    pub params: Params<T>,
}

pub struct VitOutput {
    /// One `[N, K_i]` tensor per head, in head-spec order.
    pub logits: Vec<Var>,
    /// Attention weights `[N, heads, T, T]` for every block.
    pub attention: Vec<Var>,
    /// Token sequence `[N, T, E]` entering the final block (class token at 0).
    pub final_block_input: Var,
}

impl<T: Element> Vit<T> {
    pub fn new(config: VitConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (e, p, hidden) = (config.embed_dim, config.patch_size, config.mlp_hidden());
        let mut init = Init::new(seed);
        let mut params = Params::new();
        params.push("patch_embed.weight", init.he(&[e, 3, p, p], 3 * p * p));
        params.push("patch_embed.bias", Tensor::zeros([e]));
        params.push("cls_token", init.normal(&[1, 1, e], 0.02));
        params.push("pos_embed", init.normal(&[config.tokens(), e], 0.02));
        for b in 0..config.depth {
            let mut layer = |name: &str, fan_in: usize, fan_out: usize| {
                params.push(
                    format!("blocks.{b}.{name}.weight"),
                    init.he(&[fan_in, fan_out], fan_in),
                );
                params.push(format!("blocks.{b}.{name}.bias"), Tensor::zeros([fan_out]));
            };
            layer("attn.qkv", e, 3 * e);
            layer("attn.proj", e, e);
            layer("mlp.fc1", e, hidden);
            layer("mlp.fc2", hidden, e);
            for norm in ["ln1", "ln2"] {
                params.push(
                    format!("blocks.{b}.{norm}.gamma"),
                    Tensor::full([e], T::one()),
                );
                params.push(format!("blocks.{b}.{norm}.beta"), Tensor::zeros([e]));
            }
        }
        params.push("norm.gamma", Tensor::full([e], T::one()));
        params.push("norm.beta", Tensor::zeros([e]));
        for (name, k) in &config.head_specs {
            params.push(format!("head.{name}.weight"), init.he(&[e, *k], e));
            params.push(format!("head.{name}.bias"), Tensor::zeros([*k]));
        }
        Ok(Self { config, params })
    }

    fn block(
        &self,
        tape: &Tape<T>,
        bound: &Bound,
        b: usize,
        x: Var,
        n: usize,
    ) -> Result<(Var, Var), ModelError> {
        let c = &self.config;
        let (t, e, heads) = (c.tokens(), c.embed_dim, c.num_heads);
        let d = e / heads;
        let p = |name: &str| bound.get(&format!("blocks.{b}.{name}"));

        let h = tape.layer_norm(x, 2, p("ln1.gamma"), p("ln1.beta"), LN_EPS)?;
        let qkv = tape.linear(h, p("attn.qkv.weight"), p("attn.qkv.bias"))?;
        let qkv = tape.reshape(qkv, &[n, t, 3, heads, d])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = tape.reshape(qkv, &[3, n * heads, t, d])?;
        let part = |i: usize| -> Result<Var, ModelError> {
            let v = tape.narrow(qkv, 0, i, 1)?;
            Ok(tape.reshape(v, &[n * heads, t, d])?)
        };
        let (attn, weights) = tape.scaled_dot_product_attention(part(0)?, part(1)?, part(2)?)?;
        let attn = tape.reshape(attn, &[n, heads, t, d])?;
        let attn = tape.permute(attn, &[0, 2, 1, 3])?;
        let attn = tape.reshape(attn, &[n, t, e])?;
        let attn = tape.linear(attn, p("attn.proj.weight"), p("attn.proj.bias"))?;
        let x = tape.add(x, attn)?;

        let h = tape.layer_norm(x, 2, p("ln2.gamma"), p("ln2.beta"), LN_EPS)?;
        let h = tape.linear(h, p("mlp.fc1.weight"), p("mlp.fc1.bias"))?;
        let h = tape.gelu(h);
        let h = tape.linear(h, p("mlp.fc2.weight"), p("mlp.fc2.bias"))?;
        let x = tape.add(x, h)?;
        Ok((x, tape.reshape(weights, &[n, heads, t, t])?))
    }

    pub fn forward(&self, tape: &Tape<T>, bound: &Bound, x: Var) -> Result<VitOutput, ModelError> {
        let c = &self.config;
        let n = check_input("vit_forward", &tape.shape(x), c.input_size)?;
        let (e, patches) = (c.embed_dim, c.grid().pow(2));

        let h = tape.conv2d(x, bound.get("patch_embed.weight"), c.patch_size, 0)?;
        let h = tape.add_channel_bias(h, bound.get("patch_embed.bias"))?;
        let h = tape.reshape(h, &[n, e, patches])?;
        let h = tape.transpose(h, 1, 2)?;
        let cls = tape.expand0(bound.get("cls_token"), n)?;
        let mut h = tape.concat(&[cls, h], 1)?;
        h = tape.add_trailing(h, bound.get("pos_embed"))?;

        let mut attention = Vec::with_capacity(c.depth);
        let mut final_block_input = h;
        for b in 0..c.depth {
            if b == c.depth - 1 {
                final_block_input = h;
            }
            let (next, weights) = self.block(tape, bound, b, h, n)?;
            attention.push(weights);
            h = next;
        }
        let h = tape.layer_norm(
            h,
            2,
            bound.get("norm.gamma"),
            bound.get("norm.beta"),
            LN_EPS,
        )?;
        let cls = tape.narrow(h, 1, 0, 1)?;
        let cls = tape.reshape(cls, &[n, e])?;
        let logits = c
            .head_specs
            .iter()
            .map(|(name, _)| {
                tape.linear(
                    cls,
                    bound.get(&format!("head.{name}.weight")),
                    bound.get(&format!("head.{name}.bias")),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(VitOutput {
            logits,
            attention,
            final_block_input,
        })
    }

    /// Per-head logits without gradient tracking.
    pub fn infer(&self, batch: &Tensor<T>) -> Result<Vec<Tensor<T>>, ModelError> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let x = tape.constant(batch.clone());
        let out = self.forward(&tape, &bound, x)?;
        Ok(out
            .logits
            .iter()
            .map(|&v| (*tape.value(v)).clone())
            .collect())
    }

    pub fn cast<U: Element>(&self) -> Vit<U> {
        Vit {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}
