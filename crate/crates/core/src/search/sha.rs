//! Successive halving over a fixed set of scored trials.

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One rung: how many trials were scored and on how many samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rung {
    pub trials: usize,
    pub samples: usize,
    pub kept: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShaResult {
    /// None when every surviving trial scored minus infinity.
    pub winner: Option<usize>,
    pub rungs: Vec<Rung>,
    /// Scores of the last rung's survivors on its sample set, best first.
    #[serde(with = "super::score_serde::pairs")]
    pub final_scores: Vec<(usize, f64)>,
}

fn rank(alive: &mut [(usize, f64)]) {
    alive.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// Keeps the best quarter of the trials, doubles the sample set, rescores
/// the survivors and repeats until one trial is left or the pool is used
/// up. `initial[i]` is trial i's score on `pool[..n]`; `score(i, samples)`
/// rescores trial i. Ties go to the earlier trial.
pub fn successive_halving<F>(initial: &[f64], pool_len: usize, n: usize, mut score: F) -> Result<ShaResult>
where
    F: FnMut(usize, usize) -> Result<f64>,
{
    let mut size = n.min(pool_len);
    let mut alive: Vec<(usize, f64)> = initial.iter().copied().enumerate().collect();
    let mut rungs = Vec::new();
    loop {
        let scored = alive.len();
        rank(&mut alive);
        alive.truncate((alive.len() / 4).max(1));
        rungs.push(Rung {
            trials: scored,
            samples: size,
            kept: alive.len(),
        });
        if alive.len() <= 1 || size >= pool_len {
            break;
        }
        size = (2 * size).min(pool_len);
        for (i, s) in alive.iter_mut() {
            *s = score(*i, size)?;
        }
    }
    let winner = alive.first().filter(|(_, s)| *s > f64::NEG_INFINITY).map(|(i, _)| *i);
    Ok(ShaResult {
        winner,
        rungs,
        final_scores: alive,
    })
}
