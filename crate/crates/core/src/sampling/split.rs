//! Per-class seeded train/val/test assignment.

use rand::seq::SliceRandom;

use crate::class::N_CLASSES;
use crate::error::{Error, Result};
use crate::rng;
use crate::sampling::{SampleSet, Split};

/// Split sizes for `n` items by largest remainder: each count differs from its
/// exact share by less than one item. Ties in the remainder go to the earlier split.
pub fn apportion(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut left = n - counts.iter().sum::<usize>().min(n);
    let mut order = [0usize, 1, 2];
    // stable sort keeps earlier splits first among equal remainders
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).expect("finite ratios")
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts
}

/// Assigns split tags class by class: seeded shuffle of the class members,
/// then contiguous train / val / test runs. A class with fewer members than
/// non-empty splits goes entirely to train.
pub fn stratified_split(set: &SampleSet, ratios: [f64; 3], seed: u64) -> Result<SampleSet> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    set.validate()?;
    let active = ratios.iter().filter(|&&r| r > 0.0).count();
    let mut tags = vec![Split::Train; set.len()];
    for code in 0..N_CLASSES {
        let mut members: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i].index() == code).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < active {
            log::warn!(
                "class code {code} has {} samples for {active} splits; all assigned to train",
                members.len()
            );
            continue;
        }
        members.shuffle(&mut rng::stream(seed, code as u64));
        let [n_train, n_val, _] = apportion(members.len(), ratios);
        for (k, &i) in members.iter().enumerate() {
            tags[i] = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    let mut out = set.clone();
    out.split_tags = Some(tags);
    Ok(out)
}
