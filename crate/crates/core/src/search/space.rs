//! Conditional parameter spaces. A point is built by walking a tree of
//! choices; only the dimensions visited on the way are active.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{AttackSpec, Backbone, ParamKind};
use crate::graph::Tap;
use crate::loss::{Direction, LossKind, LossSpec};

#[derive(Clone, Debug, PartialEq)]
pub enum Dim {
    Cat(usize),
    /// Closed range; `log` dims are uniform in log space, `int` dims round.
    Num { lo: f64, hi: f64, log: bool, int: bool },
}

impl Dim {
    /// Maps a numeric value to [0, 1] in prior space.
    pub fn unit(&self, v: f64) -> f64 {
        match *self {
            Dim::Num { lo, hi, log, .. } => {
                if hi <= lo {
                    return 0.5;
                }
                if log {
                    (v.ln() - lo.ln()) / (hi.ln() - lo.ln())
                } else {
                    (v - lo) / (hi - lo)
                }
            }
            Dim::Cat(_) => 0.0,
        }
    }

    pub fn from_unit(&self, u: f64) -> f64 {
        match *self {
            Dim::Num { lo, hi, log, int } => {
                let u = u.clamp(0.0, 1.0);
                let v = if log {
                    (lo.ln() + u * (hi.ln() - lo.ln())).exp()
                } else {
                    lo + u * (hi - lo)
                };
                let v = if int { v.round() } else { v };
                v.clamp(lo, hi)
            }
            Dim::Cat(_) => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Cat(usize),
    Num(f64),
}

impl Value {
    pub fn cat(self) -> usize {
        match self {
            Value::Cat(i) => i,
            Value::Num(v) => v as usize,
        }
    }

    pub fn num(self) -> f64 {
        match self {
            Value::Num(v) => v,
            Value::Cat(i) => i as f64,
        }
    }
}

/// Active dimensions of one point with their values.
pub type Assignment = BTreeMap<String, (Dim, Value)>;

/// Serialized assignment; equal keys mean the same point.
pub fn assignment_key(a: &Assignment) -> String {
    let mut s = String::new();
    for (k, (_, v)) in a {
        match v {
            Value::Cat(i) => s.push_str(&format!("{k}=#{i};")),
            Value::Num(x) => s.push_str(&format!("{k}={:016x};", x.to_bits())),
        }
    }
    s
}

pub trait Chooser {
    fn choose(&mut self, key: &str, dim: &Dim) -> Value;
}

/// Wraps a chooser and records every decision.
pub struct Recorder<'a> {
    pub inner: &'a mut dyn Chooser,
    pub assignment: Assignment,
}

impl Chooser for Recorder<'_> {
    fn choose(&mut self, key: &str, dim: &Dim) -> Value {
        let v = self.inner.choose(key, dim);
        self.assignment.insert(key.to_string(), (dim.clone(), v));
        v
    }
}

/// Draws every dimension from its prior.
pub struct PriorChooser<'a, R: Rng> {
    pub rng: &'a mut R,
}

pub fn sample_prior<R: Rng>(dim: &Dim, rng: &mut R) -> Value {
    match dim {
        Dim::Cat(n) => Value::Cat(rng.random_range(0..*n)),
        Dim::Num { .. } => Value::Num(dim.from_unit(rng.random::<f64>())),
    }
}

impl<R: Rng> Chooser for PriorChooser<'_, R> {
    fn choose(&mut self, _key: &str, dim: &Dim) -> Value {
        sample_prior(dim, self.rng)
    }
}

pub trait Space {
    type Point: Clone;

    fn build(&self, chooser: &mut dyn Chooser) -> Self::Point;

    /// Number of distinct points when finite.
    fn cardinality(&self) -> Option<u64> {
        None
    }

    fn build_recorded(&self, chooser: &mut dyn Chooser) -> (Self::Point, Assignment) {
        let mut rec = Recorder {
            inner: chooser,
            assignment: Assignment::new(),
        };
        let p = self.build(&mut rec);
        (p, rec.assignment)
    }
}

/// The attack space: backbone, its parameters, the generic decorators and
/// the loss, all conditioned on the backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackSpace {
    pub backbones: Vec<Backbone>,
    pub num_classes: usize,
    /// EOT is only searched for randomized surrogates.
    pub randomized: bool,
}

impl AttackSpace {
    /// Every backbone except NES, whose query cost dwarfs the others.
    pub fn new(num_classes: usize, randomized: bool) -> Self {
        Self {
            backbones: Backbone::ALL.into_iter().filter(|b| *b != Backbone::NES).collect(),
            num_classes,
            randomized,
        }
    }

    fn kinds(&self, b: Backbone) -> Vec<LossKind> {
        let kinds: Vec<LossKind> = b.loss_support().kinds.map(|k| k.to_vec()).unwrap_or(LossKind::ALL.to_vec());
        kinds
            .into_iter()
            .filter(|k| *k != LossKind::DLR || self.num_classes >= 3)
            .collect()
    }
}

fn pick<T: Copy>(c: &mut dyn Chooser, key: String, options: &[T]) -> T {
    if options.len() == 1 {
        options[0]
    } else {
        options[c.choose(&key, &Dim::Cat(options.len())).cat().min(options.len() - 1)]
    }
}

fn int_dim(lo: u32, hi: u32, log: bool) -> Dim {
    Dim::Num {
        lo: lo as f64,
        hi: hi as f64,
        log,
        int: true,
    }
}

impl Space for AttackSpace {
    type Point = AttackSpec;

    fn build(&self, c: &mut dyn Chooser) -> AttackSpec {
        let b = pick(c, "backbone".into(), &self.backbones);
        let params = b
            .params()
            .iter()
            .map(|p| {
                let dim = Dim::Num {
                    lo: p.lo,
                    hi: p.hi,
                    log: p.log,
                    int: p.kind == ParamKind::Int,
                };
                (p.name.to_string(), c.choose(&format!("{b}.{}", p.name), &dim).num())
            })
            .collect();
        let caps = b.generic();
        let randomize = caps.randomize && pick(c, format!("{b}.randomize"), &[false, true]);
        let eot = if self.randomized && caps.eot_max > 1 {
            c.choose(&format!("{b}.eot"), &int_dim(1, caps.eot_max, false)).num() as u32
        } else {
            1
        };
        // Restarts of a deterministic attack on a deterministic model are
        // identical, so repeat is only searched when something is random.
        let repeat = if caps.repeat_max > 1 && (randomize || self.randomized) {
            c.choose(&format!("{b}.repeat"), &int_dim(1, caps.repeat_max, caps.repeat_log))
                .num() as u32
        } else {
            1
        };
        let support = b.loss_support();
        let kind = pick(c, format!("{b}.loss.kind"), &self.kinds(b));
        let direction = pick(c, format!("{b}.loss.direction"), support.directions);
        let tap = if kind == LossKind::CE {
            Tap::Probs
        } else {
            pick(c, format!("{b}.loss.tap"), support.taps)
        };
        let ntargets = if direction != Direction::U && self.num_classes > 2 {
            c.choose(&format!("{b}.loss.ntargets"), &int_dim(1, self.num_classes as u32 - 1, false))
                .num() as usize
        } else {
            1
        };
        AttackSpec {
            backbone: b,
            params,
            randomize,
            eot,
            repeat,
            budget_seconds: None,
            loss: LossSpec {
                kind,
                direction,
                tap,
                ntargets,
                kappa: None,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn prior_points_validate() {
        let mut rng = stream(3, &[]);
        for randomized in [false, true] {
            let space = AttackSpace::new(4, randomized);
            for _ in 0..500 {
                let (spec, a) = space.build_recorded(&mut PriorChooser { rng: &mut rng });
                assert!(spec.validate_ranges().is_empty(), "{:?}", spec.validate_ranges());
                assert!(a.contains_key("backbone"));
                assert_ne!(spec.backbone, Backbone::NES);
                if !randomized {
                    assert_eq!(spec.eot, 1);
                    assert!(spec.randomize || spec.repeat == 1);
                }
            }
        }
    }

    #[test]
    fn unit_round_trips() {
        let d = Dim::Num {
            lo: 1e-4,
            hi: 1e-1,
            log: true,
            int: false,
        };
        for u in [0.0, 0.25, 0.5, 1.0] {
            assert!((d.unit(d.from_unit(u)) - u).abs() < 1e-12);
        }
    }
}
