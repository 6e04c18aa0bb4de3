use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

fn round_share(total: usize, part: usize, whole: usize) -> usize {
    ((total * part) as f64 / whole as f64).round() as usize
}

/// Stratified 60/20/20 split. Totals are `round(0.6 n)` and `round(0.2 n)`;
/// each class gets its proportional share of both, so every split keeps the
/// overall class balance up to one row. Tags depend only on the labels and seed.
pub fn split_dataset(labels: &[u8], seed: u64) -> Result<Vec<Split>> {
    let n = labels.len();
    if n < 10 {
        return Err(Error::Input(format!("cannot split {n} rows (need at least 10)")));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::Input("labels must be 0 or 1".into()));
    }
    let train_total = round_share(n, 3, 5);
    let val_total = round_share(n, 1, 5);
    let mut tags = vec![Split::Test; n];
    let mut r = rng::stream(&[seed, rng::tag("split-shuffle")]);
    let n_fake = labels.iter().filter(|&&y| y == 1).count();
    let train_fake = round_share(train_total, n_fake, n);
    let val_fake = round_share(val_total, n_fake, n);
    for (class, train, val) in [
        (0u8, train_total - train_fake, val_total - val_fake),
        (1u8, train_fake, val_fake),
    ] {
        let mut idx: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut r);
        for &i in &idx[..train.min(idx.len())] {
            tags[i] = Split::Train;
        }
        for &i in idx.iter().skip(train).take(val) {
            tags[i] = Split::Val;
        }
    }
    Ok(tags)
}
