//! Attack specifications and the parameter-range tables they validate
//! against.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Tap;
use crate::loss::{Direction, LossKind, LossSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Backbone {
    FGSM,
    PGD,
    APGD,
    DeepFool,
    CW,
    FAB,
    SQR,
    NES,
}

impl Backbone {
    pub const ALL: [Backbone; 8] = [
        Backbone::FGSM,
        Backbone::PGD,
        Backbone::APGD,
        Backbone::DeepFool,
        Backbone::CW,
        Backbone::FAB,
        Backbone::SQR,
        Backbone::NES,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Backbone::FGSM => "FGSM",
            Backbone::PGD => "PGD",
            Backbone::APGD => "APGD",
            Backbone::DeepFool => "DeepFool",
            Backbone::CW => "CW",
            Backbone::FAB => "FAB",
            Backbone::SQR => "SQR",
            Backbone::NES => "NES",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.name() == s)
    }

    pub fn params(&self) -> &'static [ParamDef] {
        use ParamKind::{Int, Real};
        const fn p(name: &'static str, kind: ParamKind, lo: f64, hi: f64, log: bool) -> ParamDef {
            ParamDef { name, kind, lo, hi, log }
        }
        const PGD: &[ParamDef] = &[
            p("step", Int, 20.0, 200.0, false),
            p("rel_stepsize", Real, 0.001, 1.0, true),
        ];
        const APGD: &[ParamDef] = &[
            p("rho", Real, 0.5, 0.9, false),
            p("n_iter", Int, 20.0, 500.0, false),
        ];
        const CW: &[ParamDef] = &[
            p("confidence", Real, 0.0, 0.1, false),
            p("max_iter", Int, 20.0, 200.0, false),
            p("binary_search_steps", Int, 5.0, 25.0, false),
            p("learning_rate", Real, 0.0001, 0.01, true),
            p("max_halving", Int, 5.0, 15.0, false),
            p("max_doubling", Int, 5.0, 15.0, false),
        ];
        const FAB: &[ParamDef] = &[
            p("n_iter", Int, 10.0, 200.0, false),
            p("eta", Real, 1.0, 1.2, false),
            p("beta", Real, 0.7, 1.0, false),
        ];
        const SQR: &[ParamDef] = &[
            p("n_queries", Int, 1000.0, 8000.0, false),
            p("p_init", Real, 0.5, 0.9, false),
        ];
        const NES: &[ParamDef] = &[
            p("step", Int, 20.0, 80.0, false),
            p("rel_stepsize", Real, 0.01, 0.1, true),
            p("n_samples", Int, 400.0, 4000.0, false),
        ];
        match self {
            Backbone::FGSM | Backbone::DeepFool => &[],
            Backbone::PGD => PGD,
            Backbone::APGD => APGD,
            Backbone::CW => CW,
            Backbone::FAB => FAB,
            Backbone::SQR => SQR,
            Backbone::NES => NES,
        }
    }

    pub fn param(&self, name: &str) -> Option<&'static ParamDef> {
        self.params().iter().find(|p| p.name == name)
    }

    pub fn generic(&self) -> GenericCaps {
        let caps = |randomize, eot_max, repeat_max, repeat_log| GenericCaps {
            randomize,
            eot_max,
            repeat_max,
            repeat_log,
        };
        match self {
            Backbone::FGSM => caps(true, 200, 10000, true),
            Backbone::PGD | Backbone::APGD => caps(true, 40, 10, false),
            Backbone::DeepFool | Backbone::CW => caps(false, 1, 1, false),
            Backbone::FAB => caps(true, 1, 10, false),
            Backbone::SQR => caps(true, 1, 3, false),
            Backbone::NES => caps(true, 1, 1, false),
        }
    }

    /// Loss settings the backbone accepts; `kinds: None` allows every kind.
    pub fn loss_support(&self) -> LossSupport {
        match self {
            Backbone::DeepFool => LossSupport {
                kinds: None,
                directions: &[Direction::D],
                taps: &[Tap::Logits, Tap::Probs],
            },
            Backbone::CW => LossSupport {
                kinds: Some(&[LossKind::Hinge]),
                directions: &[Direction::U, Direction::T],
                taps: &[Tap::Logits],
            },
            Backbone::FAB => LossSupport {
                kinds: Some(&[LossKind::L1]),
                directions: &[Direction::U, Direction::T],
                taps: &[Tap::Logits],
            },
            _ => LossSupport {
                kinds: None,
                directions: &[Direction::U, Direction::T, Direction::D],
                taps: &[Tap::Logits, Tap::Probs],
            },
        }
    }

    /// Attacks that only query scores, never gradients.
    pub fn is_gradient_free(&self) -> bool {
        matches!(self, Backbone::SQR | Backbone::NES)
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Int,
    Real,
}

/// A closed range with a uniform or log-uniform prior.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamDef {
    pub name: &'static str,
    pub kind: ParamKind,
    pub lo: f64,
    pub hi: f64,
    pub log: bool,
}

impl ParamDef {
    /// Midpoint of the range; geometric for log-uniform priors.
    pub fn default_value(&self) -> f64 {
        let m = if self.log {
            (self.lo * self.hi).sqrt()
        } else {
            0.5 * (self.lo + self.hi)
        };
        match self.kind {
            ParamKind::Int => m.round(),
            ParamKind::Real => m,
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi && (self.kind == ParamKind::Real || v.fract() == 0.0)
    }

    pub fn describe(&self) -> String {
        let star = if self.log { "*" } else { "" };
        match self.kind {
            ParamKind::Int => format!("{star}Z[{}, {}]", self.lo, self.hi),
            ParamKind::Real => format!("{star}R[{}, {}]", self.lo, self.hi),
        }
    }
}

/// Generic-parameter caps per backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenericCaps {
    /// Whether `randomize` may be enabled.
    pub randomize: bool,
    pub eot_max: u32,
    pub repeat_max: u32,
    /// Repeat count uses a log-uniform prior.
    pub repeat_log: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct LossSupport {
    pub kinds: Option<&'static [LossKind]>,
    pub directions: &'static [Direction],
    pub taps: &'static [Tap],
}

/// One attack: a backbone with its parameters, the generic decorators and
/// the loss it ascends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub backbone: Backbone,
    /// Integer parameters are stored as integral floats.
    pub params: BTreeMap<String, f64>,
    pub randomize: bool,
    pub eot: u32,
    pub repeat: u32,
    /// `try ... for n`: wall-clock seconds for the whole decorated attack.
    pub budget_seconds: Option<f64>,
    pub loss: LossSpec,
}

impl AttackSpec {
    /// A spec with table-default parameters and no decorators.
    pub fn new(backbone: Backbone, loss: LossSpec) -> Self {
        Self {
            backbone,
            params: backbone
                .params()
                .iter()
                .map(|p| (p.name.to_string(), p.default_value()))
                .collect(),
            randomize: false,
            eot: 1,
            repeat: 1,
            budget_seconds: None,
            loss,
        }
    }

    pub fn with_param(mut self, name: &str, value: f64) -> Self {
        self.params.insert(name.to_string(), value);
        self
    }

    /// Parameter value, falling back to the table default.
    pub fn param(&self, name: &str) -> f64 {
        self.params
            .get(name)
            .copied()
            .or_else(|| self.backbone.param(name).map(|p| p.default_value()))
            .unwrap_or(f64::NAN)
    }

    pub fn int_param(&self, name: &str) -> usize {
        self.param(name).max(0.0) as usize
    }

    /// Every way this spec leaves the parameter tables.
    pub fn validate_ranges(&self) -> Vec<String> {
        let b = self.backbone;
        let mut out = Vec::new();
        for (name, v) in &self.params {
            match b.param(name) {
                None => out.push(format!("{b} has no parameter {name}")),
                Some(p) if !p.contains(*v) => {
                    out.push(format!("{b} {name} = {v} outside {}", p.describe()))
                }
                _ => {}
            }
        }
        let caps = b.generic();
        if self.randomize && !caps.randomize {
            out.push(format!("{b} does not support randomize"));
        }
        if self.eot < 1 || self.eot > caps.eot_max {
            out.push(format!("{b} eot = {} outside Z[1, {}]", self.eot, caps.eot_max));
        }
        if self.repeat < 1 || self.repeat > caps.repeat_max {
            out.push(format!("{b} repeat = {} outside Z[1, {}]", self.repeat, caps.repeat_max));
        }
        if let Some(s) = self.budget_seconds {
            if !(s.is_finite() && s > 0.0) {
                out.push(format!("try budget must be a positive number of seconds, got {s}"));
            }
        }
        if let Err(e) = self.loss.validate() {
            out.push(e.to_string());
        }
        let support = b.loss_support();
        if let Some(kinds) = support.kinds {
            if !kinds.contains(&self.loss.kind) {
                out.push(format!("{b} only supports the {} loss", kinds[0].name()));
            }
        }
        if !support.directions.contains(&self.loss.direction) {
            out.push(format!("{b} does not support loss direction {:?}", self.loss.direction));
        }
        if !support.taps.contains(&self.loss.tap) {
            out.push(format!("{b} only supports logits"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.validate_ranges();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Range(v.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(b: Backbone) -> AttackSpec {
        let loss = match b {
            Backbone::DeepFool => LossSpec::difference(LossKind::L1, 1, Tap::Logits),
            Backbone::CW => LossSpec::untargeted(LossKind::Hinge, Tap::Logits),
            Backbone::FAB => LossSpec::untargeted(LossKind::L1, Tap::Logits),
            _ => LossSpec::untargeted(LossKind::CE, Tap::Probs),
        };
        AttackSpec::new(b, loss)
    }

    #[test]
    fn defaults_are_valid_midpoints() {
        for b in Backbone::ALL {
            assert!(spec(b).validate_ranges().is_empty(), "{b}");
        }
        assert_eq!(spec(Backbone::APGD).param("n_iter"), 260.0);
        assert!((spec(Backbone::PGD).param("rel_stepsize") - 0.001f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn range_bounds_are_inclusive() {
        let ok = |b, n, v| spec(b).with_param(n, v).validate_ranges().is_empty();
        assert!(ok(Backbone::APGD, "n_iter", 500.0));
        assert!(!ok(Backbone::APGD, "n_iter", 501.0));
        assert!(ok(Backbone::PGD, "rel_stepsize", 0.001));
        assert!(ok(Backbone::PGD, "rel_stepsize", 1.0));
        assert!(!ok(Backbone::PGD, "rel_stepsize", 2.0));
        assert!(ok(Backbone::SQR, "n_queries", 1000.0));
        assert!(ok(Backbone::SQR, "n_queries", 8000.0));
        assert!(!ok(Backbone::SQR, "n_queries", 8001.0));
        assert!(ok(Backbone::SQR, "p_init", 0.9));
        assert!(!ok(Backbone::SQR, "p_init", 0.95));
        assert!(ok(Backbone::FAB, "eta", 1.0));
        assert!(ok(Backbone::FAB, "eta", 1.2));
        assert!(!ok(Backbone::FAB, "eta", 1.25));
        assert!(ok(Backbone::FAB, "beta", 0.7));
        assert!(!ok(Backbone::FAB, "beta", 0.69));
        assert!(!ok(Backbone::APGD, "n_iter", 100.5));
    }

    #[test]
    fn generic_caps_are_enforced() {
        let mut s = spec(Backbone::DeepFool);
        s.eot = 2;
        assert_eq!(s.validate_ranges().len(), 1);
        let mut s = spec(Backbone::PGD);
        s.eot = 40;
        s.repeat = 10;
        assert!(s.validate_ranges().is_empty());
        s.eot = 41;
        assert!(!s.validate_ranges().is_empty());
        let mut s = spec(Backbone::CW);
        s.randomize = true;
        assert!(!s.validate_ranges().is_empty());
    }

    #[test]
    fn loss_support_is_enforced() {
        let mut s = spec(Backbone::DeepFool);
        s.loss = LossSpec::untargeted(LossKind::L1, Tap::Logits);
        assert!(!s.validate_ranges().is_empty());
        let mut s = spec(Backbone::CW);
        s.loss = LossSpec::untargeted(LossKind::Hinge, Tap::Probs);
        assert!(!s.validate_ranges().is_empty());
    }
}
