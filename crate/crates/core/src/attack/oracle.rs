//! Metered access to the surrogate model.

use std::time::{Duration, Instant};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{ForwardPass, Graph, Tap};
use crate::loss::{objective_at_tap, LossRefs, LossSpec};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

/// Per-attack resource limit. Either bound, when set, ends the attack at
/// the next iteration boundary; the attack then reports `timed_out`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub seconds: Option<f64>,
    pub queries: Option<u64>,
}

impl Budget {
    pub fn unlimited() -> Self {
        Self::default()
    }

    pub fn queries(n: u64) -> Self {
        Self {
            seconds: None,
            queries: Some(n),
        }
    }

    pub fn seconds(s: f64) -> Self {
        Self {
            seconds: Some(s),
            queries: None,
        }
    }

    /// The tighter of two budgets.
    pub fn min(self, other: Budget) -> Budget {
        let pick = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(x), Some(y)) => Some(x.min(y)),
            (x, None) => x,
            (None, y) => y,
        };
        Budget {
            seconds: pick(self.seconds, other.seconds),
            queries: match (self.queries, other.queries) {
                (Some(x), Some(y)) => Some(x.min(y)),
                (x, None) => x,
                (None, y) => y,
            },
        }
    }
}

/// Counts queries (one per forward, one per backward) and watches the
/// budget. Model randomness draws from a private stream.
pub struct Oracle<'a> {
    graph: &'a Graph,
    noise: Stream,
    queries: u64,
    start: Instant,
    deadline: Option<Instant>,
    max_queries: Option<u64>,
    exhausted: bool,
}

impl<'a> Oracle<'a> {
    pub fn new(graph: &'a Graph, budget: Budget, noise_seed: u64) -> Self {
        let start = Instant::now();
        Self {
            graph,
            noise: stream(noise_seed, &[]),
            queries: 0,
            start,
            deadline: budget
                .seconds
                .map(|s| start + Duration::from_secs_f64(s.clamp(0.0, 1e9))),
            max_queries: budget.queries,
            exhausted: false,
        }
    }

    pub fn graph(&self) -> &Graph {
        self.graph
    }

    pub fn queries(&self) -> u64 {
        self.queries
    }

    pub fn elapsed(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    /// True once the budget has run out. Sticky.
    pub fn exhausted(&mut self) -> bool {
        if !self.exhausted {
            let q = self.max_queries.is_some_and(|m| self.queries >= m);
            let t = self.deadline.is_some_and(|d| Instant::now() >= d);
            self.exhausted = q || t;
        }
        self.exhausted
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<ForwardPass> {
        self.queries += 1;
        self.graph.forward(x, &mut self.noise)
    }

    pub fn backward(&mut self, pass: &ForwardPass, seed: &Tensor, tap: Tap) -> Result<Tensor> {
        self.queries += 1;
        self.graph.backward(&pass.trace, seed, tap)
    }

    /// Objective averaged over `eot` forwards.
    pub fn objective(
        &mut self,
        x: &Tensor,
        y: usize,
        target: Option<usize>,
        loss: &LossSpec,
        refs: &LossRefs,
        eot: u32,
    ) -> Result<(f64, ForwardPass)> {
        let m = eot.max(1);
        let mut total = 0.0;
        let mut first = None;
        for _ in 0..m {
            let pass = self.forward(x)?;
            let z = tap_of(&pass, loss.tap);
            total += objective_at_tap(z, y, target, loss, refs)?.0;
            first.get_or_insert(pass);
        }
        Ok((total / m as f64, first.expect("eot >= 1")))
    }

    /// Objective and input gradient, each averaged over `eot` draws.
    pub fn objective_grad(
        &mut self,
        x: &Tensor,
        y: usize,
        target: Option<usize>,
        loss: &LossSpec,
        refs: &LossRefs,
        eot: u32,
    ) -> Result<(f64, Tensor, ForwardPass)> {
        let m = eot.max(1);
        let mut total = 0.0;
        let mut grad: Option<Tensor> = None;
        let mut first = None;
        for _ in 0..m {
            let pass = self.forward(x)?;
            let (v, gz) = objective_at_tap(tap_of(&pass, loss.tap), y, target, loss, refs)?;
            let gx = self.backward(&pass, &gz, loss.tap)?;
            total += v;
            match &mut grad {
                None => grad = Some(gx),
                Some(g) => g.add_assign(&gx)?,
            }
            first.get_or_insert(pass);
        }
        let mut g = grad.expect("eot >= 1");
        if m > 1 {
            g.scale(1.0 / m as f64);
        }
        Ok((total / m as f64, g, first.expect("eot >= 1")))
    }

    /// Reseeds the model-noise stream, e.g. from the attack stream.
    pub fn reseed<R: RngCore>(&mut self, rng: &mut R) {
        self.noise = stream(rng.next_u64(), &[]);
    }
}

pub fn tap_of(pass: &ForwardPass, tap: Tap) -> &Tensor {
    match tap {
        Tap::Logits => &pass.logits,
        Tap::Probs => &pass.probs,
    }
}
