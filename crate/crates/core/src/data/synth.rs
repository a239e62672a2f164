//! Procedural single-cell images whose appearance is a deterministic
//! function of the sampled labels, so labels are exact by construction.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{write_manifest, AttributeSchema, DataError, ImageRecord, Source};
use crate::tensor::Tensor;

/// Label indices into the schema vocabularies (attributes in schema order).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthLabels {
    pub cell_type: usize,
    pub attributes: Vec<usize>,
}

const BACKGROUNDS: [[f32; 3]; 8] = [
    [0.96, 0.86, 0.86],
    [0.86, 0.96, 0.86],
    [0.86, 0.88, 0.98],
    [0.98, 0.96, 0.80],
    [0.80, 0.80, 0.80],
    [0.98, 0.84, 0.96],
    [0.80, 0.96, 0.96],
    [0.99, 0.93, 0.83],
];

const CYTOPLASM: [[f32; 3]; 6] = [
    [0.55, 0.65, 0.92],
    [0.78, 0.88, 0.98],
    [0.62, 0.52, 0.86],
    [0.70, 0.75, 0.80],
    [0.85, 0.70, 0.80],
    [0.60, 0.80, 0.70],
];

const GRANULES: [[f32; 3]; 6] = [
    [0.45, 0.45, 0.45],
    [0.96, 0.50, 0.70],
    [0.45, 0.15, 0.60],
    [0.85, 0.12, 0.12],
    [0.10, 0.45, 0.20],
    [0.95, 0.75, 0.10],
];

struct Canvas {
    size: usize,
    planes: [Vec<f32>; 3],
}

impl Canvas {
    fn new(size: usize, fill: [f32; 3]) -> Self {
        Self {
            size,
            planes: fill.map(|v| vec![v; size * size]),
        }
    }

    fn blend(&mut self, x: usize, y: usize, color: [f32; 3], alpha: f32) {
        let i = y * self.size + x;
        for (plane, c) in self.planes.iter_mut().zip(color) {
            plane[i] = plane[i] * (1.0 - alpha) + c * alpha;
        }
    }

    /// Soft-edged disc.
    fn disc(&mut self, cx: f32, cy: f32, r: f32, color: [f32; 3], strength: f32) {
        let reach = r + 1.0;
        let (x0, x1) = (
            ((cx - reach).floor().max(0.0)) as usize,
            ((cx + reach).ceil() as usize).min(self.size - 1),
        );
        let (y0, y1) = (
            ((cy - reach).floor().max(0.0)) as usize,
            ((cy + reach).ceil() as usize).min(self.size - 1),
        );
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
                let alpha = (r + 0.5 - d).clamp(0.0, 1.0) * strength;
                if alpha > 0.0 {
                    self.blend(x, y, color, alpha);
                }
            }
        }
    }

    fn into_tensor(self) -> Tensor {
        let data = self
            .planes
            .concat()
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        Tensor::new([3, self.size, self.size], data).expect("positive size")
    }
}

fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Position of attribute `name`'s value on `[0, 1]` plus its raw index.
fn level(schema: &AttributeSchema, labels: &SynthLabels, name: &str) -> (f32, usize) {
    match schema.attributes.iter().position(|a| a.name == name) {
        Some(i) => {
            let k = schema.attributes[i].values.len();
            let v = labels.attributes[i];
            (
                if k > 1 {
                    v as f32 / (k - 1) as f32
                } else {
                    0.0
                },
                v,
            )
        }
        None => (0.0, 0),
    }
}

/// Renders one cell. Every random choice (placement, noise) comes from
/// per-feature streams of `seed`, so changing one label leaves the other
/// features' randomness untouched.
pub fn render_cell(
    schema: &AttributeSchema,
    labels: &SynthLabels,
    size: usize,
    seed: u64,
) -> Tensor {
    let s = size as f32;
    let (t_size, _) = level(schema, labels, "cell_size");
    let (t_shape, _) = level(schema, labels, "cell_shape");
    let (_, v_nucleus) = level(schema, labels, "nucleus_shape");
    let (t_nc, _) = level(schema, labels, "nc_ratio");
    let (t_chromatin, _) = level(schema, labels, "chromatin_density");
    let (t_texture, _) = level(schema, labels, "cytoplasm_texture");
    let (_, v_colour) = level(schema, labels, "cytoplasm_colour");
    let (t_vacuole, _) = level(schema, labels, "cytoplasm_vacuole");
    let (t_gran, _) = level(schema, labels, "granularity");
    let (_, v_gtype) = level(schema, labels, "granule_type");
    let (_, v_gcolour) = level(schema, labels, "granule_colour");

    let mut layout = substream(seed, 1);
    let cx = s / 2.0 + layout.random_range(-0.04..0.04) * s;
    let cy = s / 2.0 + layout.random_range(-0.04..0.04) * s;
    let phase: f32 = layout.random_range(0.0..std::f32::consts::TAU);
    let radius = s * (0.40 - 0.10 * t_size);
    let wobble = 0.15 * (1.0 - t_shape);
    let boundary = |x: f32, y: f32| {
        let (dx, dy) = (x - cx, y - cy);
        let theta = dy.atan2(dx);
        (dx * dx + dy * dy).sqrt() / (radius * (1.0 + wobble * (5.0 * theta + phase).sin()))
    };

    let mut canvas = Canvas::new(size, BACKGROUNDS[labels.cell_type % BACKGROUNDS.len()]);
    let membrane = [0.35, 0.25, 0.45];
    let ring = 0.04 + 0.02 * (labels.cell_type % 4) as f32;
    let cyto = CYTOPLASM[v_colour % CYTOPLASM.len()];
    let mut cytoplasm_mask = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let r = boundary(x as f32, y as f32);
            if r < 1.0 {
                cytoplasm_mask[y * size + x] = true;
                canvas.blend(x, y, cyto, 1.0);
                if r > 1.0 - ring * 2.0 {
                    canvas.blend(x, y, membrane, 0.6);
                }
            }
        }
    }

    // nucleus: lobe count and elongation from the shape index
    let lobes = 1 + v_nucleus % 3;
    let elongation = 1.0 + 0.6 * ((v_nucleus / 3) % 2) as f32;
    let nucleus_r = radius * (0.5 - 0.22 * t_nc);
    let lobe_r = if lobes == 1 {
        nucleus_r
    } else {
        nucleus_r * 0.58
    };
    let spread = if lobes == 1 { 0.0 } else { nucleus_r * 0.5 };
    let dark = [0.25, 0.10, 0.42];
    let light = [0.52, 0.38, 0.68];
    let chroma = [0, 1, 2].map(|c| dark[c] + (light[c] - dark[c]) * t_chromatin);
    let mut mottle = substream(seed, 4);
    let mottle_noise = Normal::new(0.0f32, 0.10 * t_chromatin + 1e-6).unwrap();
    let lobe_centers: Vec<(f32, f32)> = (0..lobes)
        .map(|k| {
            let a = phase + k as f32 * std::f32::consts::TAU / lobes as f32;
            (cx + spread * a.cos(), cy + spread * a.sin())
        })
        .collect();
    let in_nucleus = |x: f32, y: f32, margin: f32| {
        lobe_centers.iter().any(|&(lx, ly)| {
            let dx = (x - lx) / elongation;
            let dy = y - ly;
            dx * dx + dy * dy < (lobe_r + margin).powi(2)
        })
    };

    let count = 6 + (60.0 * t_gran).round() as usize;
    let granule_r = 1.0 + 0.5 * v_gtype as f32;
    let granule_c = GRANULES[v_gcolour % GRANULES.len()];
    let mut rng = substream(seed, 5);
    let mut placed = 0;
    for _ in 0..count * 20 {
        if placed == count {
            break;
        }
        let x = rng.random_range(0.0..s);
        let y = rng.random_range(0.0..s);
        // granules stay in the cytoplasm, clear of the membrane and nucleus
        if boundary(x, y) < 1.0 - 2.0 * ring - granule_r / radius && !in_nucleus(x, y, granule_r) {
            canvas.disc(x, y, granule_r, granule_c, 0.9);
            placed += 1;
        }
    }

    for y in 0..size {
        for x in 0..size {
            if in_nucleus(x as f32, y as f32, 0.0) && boundary(x as f32, y as f32) < 1.0 {
                cytoplasm_mask[y * size + x] = false;
                let n = mottle_noise.sample(&mut mottle);
                canvas.blend(x, y, chroma.map(|v| v + n), 1.0);
            }
        }
    }

    if t_vacuole > 0.5 {
        let mut rng = substream(seed, 3);
        for _ in 0..3 {
            let a: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let d = rng.random_range(0.55..0.8) * radius;
            canvas.disc(
                cx + d * a.cos(),
                cy + d * a.sin(),
                s * 0.045,
                [0.97, 0.97, 0.99],
                1.0,
            );
        }
    }

    // frosted texture is added on top so it does not depend on what lies beneath
    let mut texture = substream(seed, 2);
    let texture_noise = Normal::new(0.0f32, 0.08 * t_texture + 1e-6).unwrap();
    for (i, _) in cytoplasm_mask.iter().enumerate().filter(|(_, m)| **m) {
        let grain = texture_noise.sample(&mut texture);
        for plane in canvas.planes.iter_mut() {
            plane[i] += grain;
        }
    }

    let mut rng = substream(seed, 6);
    let noise = Normal::new(0.0f32, 0.01).unwrap();
    for plane in canvas.planes.iter_mut() {
        plane.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    canvas.into_tensor()
}

/// `count` labeled records with labels drawn independently and uniformly
/// from `schema`'s vocabularies. Ids are `syn<seed>-<index>`.
pub fn generate_synthetic(
    count: usize,
    schema: &AttributeSchema,
    seed: u64,
    size: usize,
) -> Vec<ImageRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let labels = SynthLabels {
                cell_type: rng.random_range(0..schema.cell_types.len().max(1)),
                attributes: schema
                    .attributes
                    .iter()
                    .map(|a| rng.random_range(0..a.values.len().max(1)))
                    .collect(),
            };
            let pixels = render_cell(schema, &labels, size, rng.random());
            let attributes: BTreeMap<String, String> = schema
                .attributes
                .iter()
                .zip(&labels.attributes)
                .filter_map(|(a, &v)| a.values.get(v).map(|val| (a.name.clone(), val.clone())))
                .collect();
            ImageRecord {
                id: format!("syn{seed}-{i:05}"),
                path: None,
                pixels,
                cell_type: schema.cell_types.get(labels.cell_type).cloned(),
                attributes,
                source: Source::Synthetic,
            }
        })
        .collect()
}

/// Writes `images/*.png` and `manifest.csv` under `dir`.
pub fn write_synthetic(dir: &Path, records: &[ImageRecord]) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    write_manifest(&dir.join("manifest.csv"), records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_energy(t: &Tensor) -> f64 {
        let s = t.shape()[1];
        let d = t.data();
        let mut e = 0.0;
        for c in 0..3 {
            for y in 1..s - 1 {
                for x in 1..s - 1 {
                    let at = |yy: usize, xx: usize| d[(c * s + yy) * s + xx] as f64;
                    let l =
                        4.0 * at(y, x) - at(y - 1, x) - at(y + 1, x) - at(y, x - 1) - at(y, x + 1);
                    e += l * l;
                }
            }
        }
        e
    }

    #[test]
    fn granularity_adds_speckle_energy() {
        let schema = AttributeSchema::synthetic_default();
        let gran = schema
            .attributes
            .iter()
            .position(|a| a.name == "granularity")
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for pair in 0..20u64 {
            let mut labels = SynthLabels {
                cell_type: rng.random_range(0..8),
                attributes: schema
                    .attributes
                    .iter()
                    .map(|a| rng.random_range(0..a.values.len()))
                    .collect(),
            };
            labels.attributes[gran] = 0;
            let no = render_cell(&schema, &labels, 64, pair);
            labels.attributes[gran] = 1;
            let yes = render_cell(&schema, &labels, 64, pair);
            assert!(
                laplacian_energy(&yes) > laplacian_energy(&no),
                "pair {pair}: {labels:?}"
            );
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let schema = AttributeSchema::synthetic_default();
        let a = generate_synthetic(5, &schema, 7, 32);
        let b = generate_synthetic(5, &schema, 7, 32);
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic(5, &schema, 8, 32));
        assert!(a
            .iter()
            .all(|r| r.pixels.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn marginals_pass_chi_square() {
        let schema = AttributeSchema::synthetic_default();
        let recs = generate_synthetic(1000, &schema, 3, 8);
        // 99.9% chi-square critical values for df = 1..7
        let critical = [10.83, 13.82, 16.27, 18.47, 20.52, 22.46, 24.32];
        let check = |values: &[String], observed: Vec<&str>| {
            let k = values.len();
            let expected = observed.len() as f64 / k as f64;
            let chi: f64 = values
                .iter()
                .map(|v| {
                    let o = observed.iter().filter(|x| **x == v).count() as f64;
                    (o - expected).powi(2) / expected
                })
                .sum();
            assert!(chi < critical[k - 2], "chi2 {chi} for {values:?}");
        };
        check(
            &schema.cell_types,
            recs.iter()
                .map(|r| r.cell_type.as_deref().unwrap())
                .collect(),
        );
        for a in &schema.attributes {
            check(
                &a.values,
                recs.iter()
                    .map(|r| r.attributes[&a.name].as_str())
                    .collect(),
            );
        }
    }
}
