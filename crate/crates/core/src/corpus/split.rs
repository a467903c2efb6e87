use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Disjoint train/dev/test index lists covering every instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded uniform shuffle followed by a contiguous 80/10/10 cut. The cut
/// points are `floor(0.8 n)` and `floor(0.9 n)`, so every part is within one
/// instance of its share and test takes the remainder.
pub fn split_80_10_10(n_instances: usize, seed: u64) -> Result<DatasetSplit> {
    if n_instances < 10 {
        return Err(Error::Data(format!(
            "need at least 10 instances to split, got {n_instances}"
        )));
    }
    let mut order: Vec<usize> = (0..n_instances).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train_end = n_instances * 8 / 10;
    let dev_end = n_instances * 9 / 10;
    let test = order.split_off(dev_end);
    let dev = order.split_off(train_end);
    Ok(DatasetSplit {
        train: order,
        dev,
        test,
    })
}

/// Labeled instances kept for supervised training, and the rest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSubsample {
    pub labeled: Vec<usize>,
    /// Left over; usable as unlabeled text only.
    pub unlabeled: Vec<usize>,
}

/// Keeps a seeded uniform sample of `ceil(fraction * n)` of the labeled
/// training instances. Both outputs preserve the input order.
pub fn subsample_labels(labeled_train: &[usize], fraction: f64, seed: u64) -> Result<LabelSubsample> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "label fraction must be in (0, 1], got {fraction}"
        )));
    }
    let n = labeled_train.len();
    // guard against 0.7 * 10 = 7.000000000000001
    let keep = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let keep = keep.min(n);
    let mut positions: Vec<usize> = (0..n).collect();
    positions.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = vec![false; n];
    for &p in &positions[..keep] {
        chosen[p] = true;
    }
    let (labeled, unlabeled): (Vec<_>, Vec<_>) = labeled_train
        .iter()
        .zip(&chosen)
        .partition(|(_, &keep)| keep);
    Ok(LabelSubsample {
        labeled: labeled.into_iter().map(|(&i, _)| i).collect(),
        unlabeled: unlabeled.into_iter().map(|(&i, _)| i).collect(),
    })
}
