//! The loss search space: five loss kinds, a direction modifier and an
//! output tap.
//!
//! Attacks always maximize an objective. For untargeted losses the
//! objective is the table loss itself (e.g. ascending the untargeted hinge
//! loss lifts the runner-up above the true class); for targeted losses it
//! is the negated loss with the label replaced by the target; for the
//! difference direction it is `-(targeted - untargeted)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ForwardPass, Graph, Tap};
use crate::rng::Stream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossKind {
    CE,
    Hinge,
    L1,
    DLR,
    LogitMatching,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::CE,
        LossKind::Hinge,
        LossKind::L1,
        LossKind::DLR,
        LossKind::LogitMatching,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::CE => "CE",
            LossKind::Hinge => "Hinge",
            LossKind::L1 => "L1",
            LossKind::DLR => "DLR",
            LossKind::LogitMatching => "LogitMatching",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    /// untargeted
    U,
    /// targeted
    T,
    /// targeted minus untargeted
    D,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub direction: Direction,
    pub tap: Tap,
    /// Number of top classes tried as targets (T and D only).
    pub ntargets: usize,
    /// Hinge margin; `None` is kappa = -infinity, i.e. no clamp.
    #[serde(default)]
    pub kappa: Option<f64>,
}

impl LossSpec {
    pub fn untargeted(kind: LossKind, tap: Tap) -> Self {
        Self {
            kind,
            direction: Direction::U,
            tap,
            ntargets: 1,
            kappa: None,
        }
    }

    pub fn targeted(kind: LossKind, ntargets: usize, tap: Tap) -> Self {
        Self {
            kind,
            direction: Direction::T,
            tap,
            ntargets,
            kappa: None,
        }
    }

    pub fn difference(kind: LossKind, ntargets: usize, tap: Tap) -> Self {
        Self {
            kind,
            direction: Direction::D,
            tap,
            ntargets,
            kappa: None,
        }
    }

    pub fn is_targeted(&self) -> bool {
        self.direction != Direction::U
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == LossKind::CE && self.tap != Tap::Probs {
            return Err(Error::Loss("cross-entropy supports only probs".into()));
        }
        if self.is_targeted() && self.ntargets == 0 {
            return Err(Error::Loss("ntargets must be at least 1".into()));
        }
        if let Some(k) = self.kappa {
            if !k.is_finite() {
                return Err(Error::Loss("kappa must be finite (omit it for -infinity)".into()));
            }
        }
        Ok(())
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tap = match self.tap {
            Tap::Logits => "logits",
            Tap::Probs => "probs",
        };
        let k = self.kind.name();
        match self.direction {
            Direction::U => write!(f, "untargeted {k} with {tap}"),
            Direction::T => write!(f, "targeted {k}, {} with {tap}", self.ntargets),
            Direction::D => write!(f, "targeted {k}, {} - untargeted {k} with {tap}", self.ntargets),
        }
    }
}

/// Reference outputs for logit matching: the clean output (untargeted term)
/// and a representative output of the target class (targeted term).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossRefs {
    pub clean: Option<Tensor>,
    pub target: Option<Tensor>,
}

/// Top-`n` classes by clean probability, excluding `y`; ties go to the
/// lower class index.
pub fn enumerate_targets(probs: &Tensor, y: usize, n: usize) -> Result<Vec<usize>> {
    let k = probs.len();
    if n == 0 || n >= k {
        return Err(Error::Loss(format!("ntargets must lie in [1, {}], got {n}", k - 1)));
    }
    if y >= k {
        return Err(Error::Loss(format!("label {y} out of range for {k} classes")));
    }
    let p = probs.data();
    let mut classes: Vec<usize> = (0..k).filter(|&c| c != y).collect();
    classes.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    classes.truncate(n);
    Ok(classes)
}

fn best_other(z: &[f64], y: usize) -> usize {
    let mut best = usize::MAX;
    for (i, v) in z.iter().enumerate() {
        if i != y && (best == usize::MAX || *v > z[best]) {
            best = i;
        }
    }
    best
}

/// Indices of the largest and third-largest entries (ties by index).
fn pi1_pi3(z: &[f64]) -> (usize, usize) {
    let mut idx: Vec<usize> = (0..z.len()).collect();
    idx.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    (idx[0], idx[2])
}

const CE_FLOOR: f64 = 1e-300;

/// The table loss with label `y`, and its gradient with respect to `z`.
fn table_loss(kind: LossKind, z: &[f64], y: usize, kappa: Option<f64>, zref: Option<&Tensor>) -> Result<(f64, Vec<f64>)> {
    let k = z.len();
    if y >= k {
        return Err(Error::Loss(format!("class {y} out of range for {k} outputs")));
    }
    let mut g = vec![0.0; k];
    let value = match kind {
        LossKind::CE => {
            let p = z[y].max(CE_FLOOR);
            g[y] = if z[y] > CE_FLOOR { -1.0 / z[y] } else { 0.0 };
            -p.ln()
        }
        LossKind::Hinge => {
            if k < 2 {
                return Err(Error::Loss("hinge loss needs at least 2 classes".into()));
            }
            let m = best_other(z, y);
            let v = -z[y] + z[m];
            match kappa {
                Some(kp) if v < -kp => -kp,
                _ => {
                    g[y] = -1.0;
                    g[m] = 1.0;
                    v
                }
            }
        }
        LossKind::L1 => {
            g[y] = -1.0;
            -z[y]
        }
        LossKind::DLR => {
            if k < 3 {
                return Err(Error::Loss(format!("DLR needs at least 3 classes, got {k}")));
            }
            let m = best_other(z, y);
            let (p1, p3) = pi1_pi3(z);
            let den = z[p1] - z[p3];
            if den == 0.0 {
                0.0
            } else {
                let num = z[y] - z[m];
                g[y] -= 1.0 / den;
                g[m] += 1.0 / den;
                g[p1] += num / (den * den);
                g[p3] -= num / (den * den);
                -num / den
            }
        }
        LossKind::LogitMatching => {
            let r = zref.ok_or_else(|| Error::Loss("logit matching needs a reference output".into()))?;
            if r.len() != k {
                return Err(Error::Loss("reference output has the wrong length".into()));
            }
            let mut s = 0.0;
            for (i, (a, b)) in z.iter().zip(r.data()).enumerate() {
                s += (a - b) * (a - b);
                g[i] = 2.0 * (a - b);
            }
            s
        }
    };
    Ok((value, g))
}

fn loss_and_grad(
    z: &Tensor,
    y: usize,
    target: Option<usize>,
    spec: &LossSpec,
    refs: &LossRefs,
) -> Result<(f64, Vec<f64>)> {
    let zd = z.data();
    let need_target = || target.ok_or_else(|| Error::Loss("targeted loss needs a target class".into()));
    match spec.direction {
        Direction::U => table_loss(spec.kind, zd, y, spec.kappa, refs.clean.as_ref()),
        Direction::T => table_loss(spec.kind, zd, need_target()?, spec.kappa, refs.target.as_ref()),
        Direction::D => {
            let (t, gt) = table_loss(spec.kind, zd, need_target()?, spec.kappa, refs.target.as_ref())?;
            let (u, gu) = table_loss(spec.kind, zd, y, spec.kappa, refs.clean.as_ref())?;
            Ok((t - u, gt.iter().zip(&gu).map(|(a, b)| a - b).collect()))
        }
    }
}

/// The loss as written in the table (direction D: targeted minus
/// untargeted), evaluated on the tap output `z`.
pub fn eval_loss(z: &Tensor, y: usize, target: Option<usize>, spec: &LossSpec, refs: &LossRefs) -> Result<f64> {
    loss_and_grad(z, y, target, spec, refs).map(|(v, _)| v)
}

/// +1 for untargeted losses, -1 otherwise: the objective attacks ascend is
/// `objective_sign * eval_loss`.
pub fn objective_sign(spec: &LossSpec) -> f64 {
    match spec.direction {
        Direction::U => 1.0,
        Direction::T | Direction::D => -1.0,
    }
}

/// Objective value and its gradient with respect to the tap output.
pub fn objective_at_tap(
    z: &Tensor,
    y: usize,
    target: Option<usize>,
    spec: &LossSpec,
    refs: &LossRefs,
) -> Result<(f64, Tensor)> {
    let s = objective_sign(spec);
    let (v, g) = loss_and_grad(z, y, target, spec, refs)?;
    Ok((s * v, Tensor::vector(g.into_iter().map(|d| s * d).collect())))
}

/// Gradient of the attack objective with respect to the graph input,
/// honoring the graph's backward modes. Returns the objective value, the
/// gradient and the forward pass it was computed from.
pub fn loss_gradient(
    graph: &Graph,
    x: &Tensor,
    y: usize,
    target: Option<usize>,
    spec: &LossSpec,
    refs: &LossRefs,
    rng: &mut Stream,
) -> Result<(f64, Tensor, ForwardPass)> {
    let pass = graph.forward(x, rng)?;
    let z = match spec.tap {
        Tap::Logits => &pass.logits,
        Tap::Probs => &pass.probs,
    };
    let (v, gz) = objective_at_tap(z, y, target, spec, refs)?;
    let gx = graph.backward(&pass.trace, &gz, spec.tap)?;
    Ok((v, gx, pass))
}

/// Untargeted cross-entropy of a probability vector, clipped to
/// `[0, clip]`; the search uses it as the score tie-breaker.
pub fn clipped_ce(probs: &Tensor, y: usize, clip: f64) -> f64 {
    (-probs.data()[y].max(CE_FLOOR).ln()).clamp(0.0, clip)
}
