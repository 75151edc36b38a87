//! Attack execution: backbones, decorators, the success criterion and
//! sequences of attacks.

pub mod backbones;
mod oracle;
mod spec;

use rand::RngCore;
use serde::{Deserialize, Serialize};

pub use backbones::{project, Found, Problem};
pub use oracle::{Budget, Oracle};
pub use spec::{AttackSpec, Backbone, GenericCaps, LossSupport, ParamDef, ParamKind};

use crate::error::Result;
use crate::graph::Graph;
use crate::loss::{enumerate_targets, Direction, LossRefs};
use crate::model::Classifier;
use crate::rng::{purpose, stream, Stream};
use crate::tensor::Tensor;

/// Slack on the L-infinity constraint for floating-point round-off.
pub const EPS_TOLERANCE: f64 = 1e-12;

/// Success criterion c: inside the ball and the domain, misclassified by
/// the original model, and accepted by its detector when it has one.
pub fn criterion(f: &Classifier, x_adv: &Tensor, x: &Tensor, y: usize, eps: f64, rng: &mut Stream) -> Result<bool> {
    if x_adv.shape() != x.shape()
        || x_adv.linf_distance(x) > eps + EPS_TOLERANCE
        || x_adv.data().iter().any(|v| !(0.0..=1.0).contains(v))
    {
        return Ok(false);
    }
    let pass = f.forward(x_adv, rng)?;
    if pass.logits.argmax() == y {
        return Ok(false);
    }
    Ok(f.detector.is_none_or(|d| d.accepts(&pass.probs)))
}

/// Shared inputs of every attack on one model.
#[derive(Clone, Copy)]
pub struct AttackContext<'a> {
    /// The original model f; success is judged here.
    pub model: &'a Classifier,
    /// The surrogate t(f) the attack differentiates and queries.
    pub surrogate: &'a Graph,
    pub eps: f64,
    /// Per-sample, per-attack limit.
    pub budget: Budget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub x_adv: Tensor,
    pub success: bool,
    pub queries: u64,
    pub wall_seconds: f64,
    pub timed_out: bool,
    /// Surrogate objective at `x_adv`.
    pub objective: f64,
}

/// Runs one decorated attack: restarts (`repeat`), targets, the try-for
/// budget and the success check on the original model. Returns the first
/// success, otherwise the point with the highest surrogate objective.
pub fn run_attack(ctx: &AttackContext, spec: &AttackSpec, x: &Tensor, y: usize, rng: &mut Stream) -> Result<AttackOutcome> {
    let budget = match spec.budget_seconds {
        Some(s) => ctx.budget.min(Budget::seconds(s)),
        None => ctx.budget,
    };
    let base = rng.next_u64();
    let mut oracle = Oracle::new(ctx.surrogate, budget, base);
    let clean = oracle.forward(x)?;
    let clean_tap = oracle::tap_of(&clean, spec.loss.tap).clone();

    let backbone = spec.backbone;
    let k = ctx.surrogate.num_classes();
    let internal_targets = matches!(backbone, Backbone::DeepFool)
        || (backbone == Backbone::FAB && spec.loss.direction == Direction::U);
    let targets: Vec<Option<usize>> = if spec.loss.direction == Direction::U || internal_targets {
        vec![None]
    } else {
        enumerate_targets(&clean.probs, y, spec.loss.ntargets.clamp(1, k - 1))?
            .into_iter()
            .map(Some)
            .collect()
    };
    // Without any source of randomness every restart would repeat the first.
    let restarts = if spec.randomize || ctx.surrogate.is_randomized() {
        spec.repeat.max(1)
    } else {
        1
    };

    let mut best: Option<(f64, Tensor)> = None;
    for r in 0..restarts {
        for (ti, t) in targets.iter().enumerate() {
            if oracle.exhausted() {
                break;
            }
            let refs = LossRefs {
                clean: Some(clean_tap.clone()),
                target: t.map(|t| backbones::swapped_reference(&clean_tap, y, t)),
            };
            let random_start = spec.randomize && !(backbone == Backbone::FAB && r == 0);
            let problem = Problem {
                x0: x,
                y,
                target: *t,
                eps: ctx.eps,
                spec,
                refs: &refs,
                random_start,
            };
            let mut arng = stream(base, &[r as u64, ti as u64]);
            let found = backbones::run_backbone(&mut oracle, &problem, &mut arng)?;
            let mut crng = stream(base, &[r as u64, ti as u64, purpose::DRAWS]);
            if criterion(ctx.model, &found.x, x, y, ctx.eps, &mut crng)? {
                return Ok(AttackOutcome {
                    x_adv: found.x,
                    success: true,
                    queries: oracle.queries(),
                    wall_seconds: oracle.elapsed(),
                    timed_out: false,
                    objective: found.objective,
                });
            }
            if best.as_ref().is_none_or(|b| found.objective > b.0) {
                best = Some((found.objective, found.x));
            }
        }
    }
    let timed_out = oracle.exhausted();
    let (objective, x_adv) = best.unwrap_or((f64::NEG_INFINITY, x.clone()));
    Ok(AttackOutcome {
        x_adv,
        success: false,
        queries: oracle.queries(),
        wall_seconds: oracle.elapsed(),
        timed_out,
        objective,
    })
}

/// Stream for attack `index` of a sequence on sample `sample_id`. Keyed by
/// identity rather than execution order, so an attack sees the same
/// randomness whether it runs alone, inside a sequence, or in a search.
pub fn attack_stream(seed: u64, sample_id: u64, index: usize) -> Stream {
    stream(seed, &[purpose::SEQUENCE, sample_id, index as u64])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceOutcome {
    pub outcome: AttackOutcome,
    /// Position of the attack that succeeded.
    pub winner: Option<usize>,
    /// Number of attacks actually executed.
    pub executed: usize,
}

/// Runs attacks in order and returns the first success; when none
/// succeeds, the last attack's point is returned. An empty sequence
/// returns the clean input.
pub fn run_sequence(
    ctx: &AttackContext,
    specs: &[AttackSpec],
    x: &Tensor,
    y: usize,
    seed: u64,
    sample_id: u64,
) -> Result<SequenceOutcome> {
    let mut queries = 0;
    let mut seconds = 0.0;
    let mut timed_out = false;
    let mut last = None;
    for (j, spec) in specs.iter().enumerate() {
        let mut rng = attack_stream(seed, sample_id, j);
        let mut out = run_attack(ctx, spec, x, y, &mut rng)?;
        queries += out.queries;
        seconds += out.wall_seconds;
        timed_out |= out.timed_out;
        out.queries = queries;
        out.wall_seconds = seconds;
        out.timed_out = timed_out;
        if out.success {
            return Ok(SequenceOutcome {
                outcome: out,
                winner: Some(j),
                executed: j + 1,
            });
        }
        last = Some(out);
    }
    Ok(SequenceOutcome {
        outcome: last.unwrap_or(AttackOutcome {
            x_adv: x.clone(),
            success: false,
            queries: 0,
            wall_seconds: 0.0,
            timed_out: false,
            objective: f64::NEG_INFINITY,
        }),
        winner: None,
        executed: specs.len(),
    })
}
