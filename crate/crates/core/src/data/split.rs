use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSpec {
    /// Exact sizes; must sum to the dataset size.
    Counts {
        train: usize,
        val: usize,
        test: usize,
        seed: u64,
    },
    /// Fractions in (0, 1) summing to 1, apportioned by largest remainder.
    Fractions {
        train: f64,
        val: f64,
        test: f64,
        seed: u64,
    },
}

impl SplitSpec {
    pub fn seed(&self) -> u64 {
        match self {
            SplitSpec::Counts { seed, .. } | SplitSpec::Fractions { seed, .. } => *seed,
        }
    }

    /// Resolves this split to `[train, val, test]` sizes for `n` items.
    pub fn sizes(&self, n: usize) -> Result<[usize; 3], DataError> {
        match *self {
            SplitSpec::Counts {
                train, val, test, ..
            } => {
                if train + val + test != n {
                    return Err(DataError::Split(format!(
                        "counts {train}+{val}+{test} = {} do not match {n} records",
                        train + val + test
                    )));
                }
                Ok([train, val, test])
            }
            SplitSpec::Fractions {
                train, val, test, ..
            } => {
                let fractions = [train, val, test];
                if fractions.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
                    return Err(DataError::Split(format!(
                        "fractions {fractions:?} must lie in (0, 1)"
                    )));
                }
                if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(DataError::Split(format!(
                        "fractions {fractions:?} must sum to 1"
                    )));
                }
                Ok(largest_remainder(n, fractions))
            }
        }
    }
}

fn largest_remainder(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let quotas = fractions.map(|f| f * n as f64);
    let mut sizes = quotas.map(|q| q.floor() as usize);
    let mut order = [0usize, 1, 2];
    // stable: equal remainders go to the earlier split
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap()
    });
    let leftover = n - sizes.iter().sum::<usize>();
    for &i in order.iter().take(leftover) {
        sizes[i] += 1;
    }
    sizes
}

/// Seeded shuffle followed by a cut into train/val/test.
pub fn split_dataset<T>(
    items: Vec<T>,
    spec: &SplitSpec,
) -> Result<(Vec<T>, Vec<T>, Vec<T>), DataError> {
    let [train, val, _] = spec.sizes(items.len())?;
    let mut items = items;
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed()));
    let test = items.split_off(train + val);
    let val_items = items.split_off(train);
    Ok((items, val_items, test))
}
