//! Tree-structured Parzen estimator over a conditional space.
//!
//! Observations are split into a good set (top `gamma` fraction) and a bad
//! set. Every active dimension gets a density per set: a mixture of one
//! uniform prior component and a truncated Gaussian per observation
//! (bandwidth = the wider of the gaps to its neighbors, floored at
//! 1/(n+1)) for numeric dims, and
//! +1-smoothed counts for categorical dims. Candidates are drawn from the
//! good densities and ranked by the summed log density ratio.

use std::collections::HashSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::space::{assignment_key, sample_prior, Assignment, Chooser, Dim, PriorChooser, Space, Value};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TpeConfig {
    pub gamma: f64,
    pub n_startup: usize,
    pub n_candidates: usize,
    /// Prior draws tried before declaring the space exhausted.
    pub max_draws: usize,
}

impl Default for TpeConfig {
    fn default() -> Self {
        Self {
            gamma: 0.25,
            n_startup: 10,
            n_candidates: 24,
            max_draws: 1000,
        }
    }
}

const MIN_BANDWIDTH: f64 = 1e-3;

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

/// Per-dimension Parzen density built from the values one set took.
struct Parzen {
    dim: Dim,
    cats: Vec<usize>,
    points: Vec<(f64, f64)>,
}

impl Parzen {
    fn new(key: &str, dim: &Dim, set: &[&Assignment]) -> Self {
        let values: Vec<Value> = set.iter().filter_map(|a| a.get(key).map(|(_, v)| *v)).collect();
        match dim {
            Dim::Cat(n) => {
                let mut cats = vec![0; *n];
                for v in values {
                    if let Some(c) = cats.get_mut(v.cat()) {
                        *c += 1;
                    }
                }
                Self {
                    dim: dim.clone(),
                    cats,
                    points: Vec::new(),
                }
            }
            Dim::Num { .. } => {
                let mut us: Vec<f64> = values.iter().map(|v| dim.unit(v.num()).clamp(0.0, 1.0)).collect();
                us.sort_by(f64::total_cmp);
                let floor = (1.0 / (us.len() + 1).min(100) as f64).max(MIN_BANDWIDTH);
                let points = (0..us.len())
                    .map(|i| {
                        let left = if i > 0 { us[i] - us[i - 1] } else { us[i] };
                        let right = if i + 1 < us.len() { us[i + 1] - us[i] } else { 1.0 - us[i] };
                        (us[i], left.max(right).clamp(floor, 1.0))
                    })
                    .collect();
                Self {
                    dim: dim.clone(),
                    cats: Vec::new(),
                    points,
                }
            }
        }
    }

    fn log_density(&self, v: Value) -> f64 {
        match self.dim {
            Dim::Cat(n) => {
                let total: usize = self.cats.iter().sum();
                let c = self.cats.get(v.cat()).copied().unwrap_or(0);
                ((c + 1) as f64 / (total + n) as f64).ln()
            }
            Dim::Num { .. } => {
                let u = self.dim.unit(v.num()).clamp(0.0, 1.0);
                let mut d = 1.0;
                for &(mu, s) in &self.points {
                    let mass = normal_cdf((1.0 - mu) / s) - normal_cdf(-mu / s);
                    let z = (u - mu) / s;
                    d += (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt() * mass.max(1e-300));
                }
                (d / (self.points.len() + 1) as f64).ln()
            }
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Value {
        match self.dim {
            Dim::Cat(n) => {
                let total: usize = self.cats.iter().sum::<usize>() + n;
                let mut r = rng.random_range(0..total);
                for (i, c) in self.cats.iter().enumerate() {
                    if r < c + 1 {
                        return Value::Cat(i);
                    }
                    r -= c + 1;
                }
                Value::Cat(n - 1)
            }
            Dim::Num { .. } => {
                let j = rng.random_range(0..=self.points.len());
                let u = if j == self.points.len() {
                    rng.random::<f64>()
                } else {
                    let (mu, s) = self.points[j];
                    let normal = Normal::new(mu, s).expect("positive bandwidth");
                    let mut u = mu;
                    for _ in 0..64 {
                        let t = normal.sample(rng);
                        if (0.0..=1.0).contains(&t) {
                            u = t;
                            break;
                        }
                    }
                    u
                };
                Value::Num(self.dim.from_unit(u))
            }
        }
    }
}

struct GoodChooser<'a, R: Rng> {
    good: &'a [&'a Assignment],
    rng: &'a mut R,
}

impl<R: Rng> Chooser for GoodChooser<'_, R> {
    fn choose(&mut self, key: &str, dim: &Dim) -> Value {
        if self.good.iter().any(|a| a.contains_key(key)) {
            Parzen::new(key, dim, self.good).sample(self.rng)
        } else {
            sample_prior(dim, self.rng)
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tpe {
    pub config: TpeConfig,
    observations: Vec<(Assignment, f64)>,
    seen: HashSet<String>,
}

impl Tpe {
    pub fn new(config: TpeConfig) -> Self {
        Self {
            config,
            observations: Vec::new(),
            seen: HashSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn observe(&mut self, assignment: Assignment, score: f64) {
        self.seen.insert(assignment_key(&assignment));
        self.observations.push((assignment, score));
    }

    /// Good and bad observation sets; ties keep insertion order.
    pub fn split(&self) -> (Vec<&Assignment>, Vec<&Assignment>) {
        let mut order: Vec<usize> = (0..self.observations.len()).collect();
        order.sort_by(|&a, &b| self.observations[b].1.total_cmp(&self.observations[a].1));
        let n_good = ((self.config.gamma * order.len() as f64).ceil() as usize).clamp(1, order.len().max(1));
        let pick = |ix: &[usize]| ix.iter().map(|&i| &self.observations[i].0).collect::<Vec<_>>();
        let (g, b) = order.split_at(n_good.min(order.len()));
        (pick(g), pick(b))
    }

    /// Summed log ratio l(x)/g(x) over the candidate's active dims.
    pub fn ratio(&self, candidate: &Assignment) -> f64 {
        let (good, bad) = self.split();
        candidate
            .iter()
            .map(|(k, (dim, v))| Parzen::new(k, dim, &good).log_density(*v) - Parzen::new(k, dim, &bad).log_density(*v))
            .sum()
    }

    /// Best unseen point according to the model, or a prior draw during
    /// startup. The returned point is marked as seen.
    pub fn suggest<S: Space, R: Rng>(&mut self, space: &S, rng: &mut R) -> Result<(S::Point, Assignment)> {
        if space.cardinality().is_some_and(|c| self.seen.len() as u64 >= c) {
            return Err(Error::SpaceExhausted);
        }
        if self.observations.len() >= self.config.n_startup {
            let (good, _) = self.split();
            let mut best: Option<(f64, S::Point, Assignment)> = None;
            for _ in 0..self.config.n_candidates {
                let (p, a) = space.build_recorded(&mut GoodChooser { good: &good, rng });
                if self.seen.contains(&assignment_key(&a)) {
                    continue;
                }
                let r = self.ratio(&a);
                if best.as_ref().is_none_or(|b| r > b.0) {
                    best = Some((r, p, a));
                }
            }
            if let Some((_, p, a)) = best {
                self.seen.insert(assignment_key(&a));
                return Ok((p, a));
            }
        }
        for _ in 0..self.config.max_draws {
            let (p, a) = space.build_recorded(&mut PriorChooser { rng });
            if self.seen.insert(assignment_key(&a)) {
                return Ok((p, a));
            }
        }
        Err(Error::SpaceExhausted)
    }
}
