use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

use super::interactions::RawInteractions;
use crate::error::DataError;

/// Train/validation/test partition of one interaction set, kept per user.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<Vec<u32>>,
    pub valid: Vec<Vec<u32>>,
    pub test: Vec<Vec<u32>>,
    pub n_items: usize,
    pub seed: u64,
    pub ratios: SplitRatios,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Eq for SplitRatios {}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

/// `floor(n * ratio)`, tolerant of binary rounding just below an integer.
fn floor_count(n: usize, ratio: f64) -> usize {
    (n as f64 * ratio + 1e-9).floor() as usize
}

/// Per-user shuffled partition: `floor(n·valid)` validation items,
/// `floor(n·test)` test items, the remainder for training. Each list is
/// returned sorted.
pub fn split(raw: &RawInteractions, ratios: SplitRatios, seed: u64) -> Result<DatasetSplit, DataError> {
    let sane = [ratios.train, ratios.valid, ratios.test]
        .iter()
        .all(|r| r.is_finite() && *r >= 0.0)
        && ratios.valid + ratios.test < 1.0
        && ((ratios.train + ratios.valid + ratios.test) - 1.0).abs() < 1e-9;
    if !sane {
        return Err(DataError::Consistency(format!(
            "split ratios {}/{}/{} must be non-negative, sum to 1 and leave room for training",
            ratios.train, ratios.valid, ratios.test
        )));
    }
    let mut rng = SplitMix64::seed_from_u64(seed);
    let n_users = raw.n_users();
    let (mut train, mut valid, mut test) = (
        Vec::with_capacity(n_users),
        Vec::with_capacity(n_users),
        Vec::with_capacity(n_users),
    );
    for (u, items) in raw.user_items.iter().enumerate() {
        if items.is_empty() {
            return Err(DataError::Consistency(format!("user {u} has no interactions")));
        }
        let mut shuffled = items.clone();
        shuffled.shuffle(&mut rng);
        let n = shuffled.len();
        let n_test = floor_count(n, ratios.test);
        let n_valid = floor_count(n, ratios.valid);
        let mut te = shuffled[..n_test].to_vec();
        let mut va = shuffled[n_test..n_test + n_valid].to_vec();
        let mut tr = shuffled[n_test + n_valid..].to_vec();
        te.sort_unstable();
        va.sort_unstable();
        tr.sort_unstable();
        train.push(tr);
        valid.push(va);
        test.push(te);
    }
    Ok(DatasetSplit {
        train,
        valid,
        test,
        n_items: raw.n_items,
        seed,
        ratios,
    })
}

impl DatasetSplit {
    pub fn n_users(&self) -> usize {
        self.train.len()
    }

    pub fn edge_counts(&self) -> (usize, usize, usize) {
        let count = |s: &[Vec<u32>]| s.iter().map(Vec::len).sum();
        (count(&self.train), count(&self.valid), count(&self.test))
    }

    /// Text manifest recording how the split was produced.
    pub fn manifest(&self) -> String {
        let (tr, va, te) = self.edge_counts();
        format!(
            "seed={}\nratios={},{},{}\nrounding=floor(valid,test),remainder->train\nusers={}\nitems={}\ntrain_edges={tr}\nvalid_edges={va}\ntest_edges={te}\n",
            self.seed,
            self.ratios.train,
            self.ratios.valid,
            self.ratios.test,
            self.n_users(),
            self.n_items,
        )
    }
}
