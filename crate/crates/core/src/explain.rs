//! Grad-CAM saliency for both models and heatmap overlays.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{bilinear_resize, encode_png};
use crate::models::{Cnn, ModelError, Vit};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("unknown head `{0}`")]
    UnknownHead(String),
    #[error("class {class} out of range for head `{head}` with {classes} classes")]
    UnknownClass {
        head: String,
        class: usize,
        classes: usize,
    },
    #[error("model retained no activations for the target layer")]
    NoActivations,
    #[error("expected a [3, {expected}, {expected}] image, got {found:?}")]
    InputSize { expected: usize, found: Vec<usize> },
    #[error("overlay needs an RGB image, got shape {0:?}")]
    Overlay(Vec<usize>),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How the target activation is laid out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureLayout {
    /// `[1, K, h, w]` feature maps.
    Channels,
    /// `[1, 1 + grid², K]` tokens; the leading class token is skipped.
    Tokens { grid: usize },
}

pub struct CamForward {
    pub features: Var,
    pub layout: FeatureLayout,
    /// One `[1, classes]` pre-softmax logit row per head.
    pub logits: Vec<Var>,
}

/// A model that exposes a target activation for Grad-CAM.
pub trait CamModel {
    fn cam_heads(&self) -> Vec<(String, usize)>;
    fn cam_input_size(&self) -> usize;
    /// Forward pass of one `[1, 3, S, S]` image.
    fn cam_forward(&self, tape: &Tape, x: Var) -> Result<CamForward, ExplainError>;
}

impl CamModel for Cnn {
    fn cam_heads(&self) -> Vec<(String, usize)> {
        vec![("cell_type".to_string(), self.config.num_classes)]
    }

    fn cam_input_size(&self) -> usize {
        self.config.input_size
    }

    fn cam_forward(&self, tape: &Tape, x: Var) -> Result<CamForward, ExplainError> {
        let bound = self.params.bind(tape, false);
        let out = self.forward(tape, &bound, x)?;
        Ok(CamForward {
            features: out.features,
            layout: FeatureLayout::Channels,
            logits: vec![out.logits],
        })
    }
}

/// Targets the patch tokens entering the final encoder block. The final
/// block's own output patch tokens never reach a class-token readout, so
/// their gradient is identically zero.
impl CamModel for Vit {
    fn cam_heads(&self) -> Vec<(String, usize)> {
        self.config.head_specs.clone()
    }

    fn cam_input_size(&self) -> usize {
        self.config.input_size
    }

    fn cam_forward(&self, tape: &Tape, x: Var) -> Result<CamForward, ExplainError> {
        let bound = self.params.bind(tape, false);
        let out = self.forward(tape, &bound, x)?;
        Ok(CamForward {
            features: out.final_block_input,
            layout: FeatureLayout::Tokens {
                grid: self.config.grid(),
            },
            logits: out.logits,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub image_id: String,
    pub head: String,
    pub class: usize,
    pub height: usize,
    pub width: usize,
    /// Rectified map, row-major.
    pub grid: Vec<f64>,
    /// `grid / max(grid)`, or all zeros when the max is zero.
    pub normalized: Vec<f64>,
}

impl SaliencyMap {
    /// Builds the map from features and their gradients, both `[K, h·w]`.
    pub fn from_activations(
        image_id: &str,
        head: &str,
        class: usize,
        (height, width): (usize, usize),
        features: &[Vec<f64>],
        grads: &[Vec<f64>],
    ) -> Self {
        let cells = height * width;
        let mut grid = vec![0.0; cells];
        for (f, g) in features.iter().zip(grads) {
            let alpha = g.iter().sum::<f64>() / cells as f64;
            grid.iter_mut().zip(f).for_each(|(m, v)| *m += alpha * v);
        }
        grid.iter_mut().for_each(|m| *m = m.max(0.0));
        let normalized = normalize(&grid);
        Self {
            image_id: image_id.to_string(),
            head: head.to_string(),
            class,
            height,
            width,
            grid,
            normalized,
        }
    }

    /// Normalized map resized bilinearly to `h × w`.
    pub fn upsampled(&self, h: usize, w: usize) -> Tensor {
        let t = Tensor::new(
            [1, self.height, self.width],
            self.normalized.iter().map(|&v| v as f32).collect(),
        )
        .expect("grid shape");
        let mut up = bilinear_resize(&t, h, w);
        up.data_mut()
            .iter_mut()
            .for_each(|v| *v = v.clamp(0.0, 1.0));
        up
    }
}

fn normalize(grid: &[f64]) -> Vec<f64> {
    let max = grid.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        grid.iter().map(|v| v / max).collect()
    } else {
        vec![0.0; grid.len()]
    }
}

/// Splits an activation tensor into `K` spatial maps of `h·w` cells.
fn channels(
    values: &[f32],
    shape: &[usize],
    layout: FeatureLayout,
) -> Result<(Vec<Vec<f64>>, (usize, usize)), ExplainError> {
    match layout {
        FeatureLayout::Channels => {
            let [1, k, h, w] = shape else {
                return Err(ExplainError::NoActivations);
            };
            let maps = values
                .chunks(h * w)
                .map(|c| c.iter().map(|&v| v as f64).collect())
                .collect();
            debug_assert_eq!(values.len(), k * h * w);
            Ok((maps, (*h, *w)))
        }
        FeatureLayout::Tokens { grid } => {
            let [1, t, k] = shape else {
                return Err(ExplainError::NoActivations);
            };
            if *t != 1 + grid * grid {
                return Err(ExplainError::NoActivations);
            }
            let maps = (0..*k)
                .map(|e| (1..*t).map(|tok| values[tok * k + e] as f64).collect())
                .collect();
            Ok((maps, (grid, grid)))
        }
    }
}

/// Grad-CAM of the pre-softmax logit of `class` on `head`. `image` is a
/// preprocessed `[3, S, S]` tensor at the model's input size.
pub fn grad_cam<M: CamModel + ?Sized>(
    model: &M,
    image: &Tensor,
    image_id: &str,
    head: &str,
    class: usize,
) -> Result<SaliencyMap, ExplainError> {
    let heads = model.cam_heads();
    let head_index = heads
        .iter()
        .position(|(n, _)| n == head)
        .ok_or_else(|| ExplainError::UnknownHead(head.to_string()))?;
    let classes = heads[head_index].1;
    if class >= classes {
        return Err(ExplainError::UnknownClass {
            head: head.to_string(),
            class,
            classes,
        });
    }
    let s = model.cam_input_size();
    if image.shape() != [3, s, s] {
        return Err(ExplainError::InputSize {
            expected: s,
            found: image.shape().to_vec(),
        });
    }

    let tape: Tape = Tape::new();
    // The input tracks gradients so that every activation derived from it does.
    let x = tape.param(image.reshape([1, 3, s, s])?);
    let fwd = model.cam_forward(&tape, x)?;
    let logits = *fwd
        .logits
        .get(head_index)
        .ok_or(ExplainError::NoActivations)?;
    let row = tape.reshape(logits, &[classes])?;
    let score = tape.pick(row, class)?;
    let features = tape.value(fwd.features);
    let shape = tape.shape(fwd.features);
    if features.numel() == 0 {
        return Err(ExplainError::NoActivations);
    }
    let grads = tape.backward(score)?;
    let zeros = vec![0.0f32; features.numel()];
    let g = grads.wrt(fwd.features).unwrap_or(&zeros);

    let (feature_maps, hw) = channels(features.data(), &shape, fwd.layout)?;
    let (grad_maps, _) = channels(g, &shape, fwd.layout)?;
    Ok(SaliencyMap::from_activations(
        image_id,
        head,
        class,
        hw,
        &feature_maps,
        &grad_maps,
    ))
}

/// Blue to red ramp through cyan, green and yellow.
pub fn colormap(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    [
        (4.0 * t - 2.0).clamp(0.0, 1.0),
        (4.0 * t).min(4.0 - 4.0 * t).clamp(0.0, 1.0),
        (2.0 - 4.0 * t).clamp(0.0, 1.0),
    ]
}

pub const OVERLAY_ALPHA: f64 = 0.4;

/// Blends the colormapped saliency over `image` (`[3, H, W]` in `[0, 1]`).
/// Each pixel's blend weight is `0.4 × saliency`, so zero saliency leaves
/// the image untouched.
pub fn overlay_pixels(map: &SaliencyMap, image: &Tensor) -> Result<Tensor, ExplainError> {
    let &[3, h, w] = image.shape() else {
        return Err(ExplainError::Overlay(image.shape().to_vec()));
    };
    if h == 0 || w == 0 {
        return Err(ExplainError::Overlay(image.shape().to_vec()));
    }
    let up = map.upsampled(h, w);
    if up.shape() != [1, h, w] {
        return Err(ExplainError::Overlay(up.shape().to_vec()));
    }
    let mut out = image.clone();
    let plane = h * w;
    for (p, &m) in up.data().iter().enumerate() {
        let a = OVERLAY_ALPHA * m as f64;
        let color = colormap(m as f64);
        for (c, col) in color.iter().enumerate() {
            let v = &mut out.data_mut()[c * plane + p];
            *v = ((1.0 - a) * *v as f64 + a * col) as f32;
        }
    }
    Ok(out)
}

/// PNG bytes of [`overlay_pixels`].
pub fn overlay(map: &SaliencyMap, image: &Tensor) -> Result<Vec<u8>, ExplainError> {
    Ok(encode_png(&overlay_pixels(map, image)?))
}

/// Writes `explanations/<image-id>/<head>.png` under `root`.
pub fn write_overlay(
    root: &Path,
    map: &SaliencyMap,
    image: &Tensor,
) -> Result<PathBuf, ExplainError> {
    let dir = root.join("explanations").join(&map.image_id);
    std::fs::create_dir_all(&dir).map_err(|source| ExplainError::Io {
        path: dir.clone(),
        source,
    })?;
    let path = dir.join(format!("{}.png", map.head));
    std::fs::write(&path, overlay(map, image)?).map_err(|source| ExplainError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

/// Fixed `[1, K, h, w]` feature stack with class scores
/// `score_c = offset_c + scale · Σₖ Σₚ G[c][k][p]·A[k][p]`, so the gradient
/// of class `c` with respect to map `k` is `scale · G[c][k]`. The input
/// image is ignored. Its Grad-CAM has a closed form.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    pub features: Tensor,
    /// `[classes, K, h, w]`.
    pub gradients: Tensor,
    pub offsets: Vec<f32>,
    pub scale: f32,
    pub input_size: usize,
}

impl CamModel for LinearProbe {
    fn cam_heads(&self) -> Vec<(String, usize)> {
        vec![("probe".to_string(), self.gradients.shape()[0])]
    }

    fn cam_input_size(&self) -> usize {
        self.input_size
    }

    fn cam_forward(&self, tape: &Tape, _x: Var) -> Result<CamForward, ExplainError> {
        let features = tape.param(self.features.clone());
        let classes = self.gradients.shape()[0];
        let per_class = self.gradients.numel() / classes.max(1);
        let mut scores = Vec::with_capacity(classes);
        for c in 0..classes {
            let g = self.gradients.data()[c * per_class..(c + 1) * per_class].to_vec();
            let g = tape.constant(Tensor::new(self.features.shape().to_vec(), g)?);
            let s = tape.scale(tape.sum(tape.mul(features, g)?), self.scale);
            let s = tape.reshape(s, &[1, 1])?;
            let b = tape.constant(Tensor::new([1, 1], vec![self.offsets[c]])?);
            scores.push(tape.add(s, b)?);
        }
        Ok(CamForward {
            features,
            layout: FeatureLayout::Channels,
            logits: vec![tape.concat(&scores, 1)?],
        })
    }
}
