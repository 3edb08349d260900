use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: Vec<Fold>,
    pub seed: u64,
}

/// Unstratified k-fold split: a seeded shuffle dealt into `k` contiguous
/// validation blocks whose sizes differ by at most one.
pub fn make_folds(case_ids: &[String], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if case_ids.len() < k {
        return Err(Error::Input(format!(
            "{} cases cannot be split into {k} folds",
            case_ids.len()
        )));
    }
    let mut ids = case_ids.to_vec();
    ids.sort();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Input("duplicate case ids".into()));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n = ids.len();
    let (base, extra) = (n / k, n % k);
    let mut start = 0;
    let folds = (0..k)
        .map(|f| {
            let len = base + usize::from(f < extra);
            let val_ids = ids[start..start + len].to_vec();
            let train_ids = ids[..start].iter().chain(&ids[start + len..]).cloned().collect();
            start += len;
            Fold { train_ids, val_ids }
        })
        .collect();
    Ok(FoldSplit { folds, seed })
}
