//! Robust test error, attack success rate and evaluation reports.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attack::{run_sequence, AttackContext, Budget};
use crate::dsl::{format, AttackProgram};
use crate::error::Result;
use crate::graph::Graph;
use crate::model::{Classifier, Dataset};
use crate::parallel;
use crate::rng::{purpose, stream};
use crate::tensor::Tensor;

/// What one evaluation of the model saw on the clean and adversarial input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DrawOutcome {
    pub clean_correct: bool,
    pub clean_accepted: bool,
    pub adv_correct: bool,
    pub adv_accepted: bool,
}

fn ind(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Per-sample row. Fractional fields are means over the draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: u64,
    pub label: usize,
    /// Classified correctly at attack time, so the program ran on it.
    pub attacked: bool,
    pub clean_correct: f64,
    pub clean_accepted: f64,
    pub adv_correct: f64,
    pub adv_accepted: f64,
    /// Misclassified and accepted at the adversarial point.
    pub success: f64,
    /// max{1[f(x)!=y] g(x), 1[f(x')!=y] g(x')}
    pub rerr_num: f64,
    /// max{g(x), g(x')}
    pub rerr_den: f64,
    pub queries: u64,
    /// Position of the attack that broke the sample.
    pub winner: Option<usize>,
    pub timed_out: bool,
}

impl SampleRecord {
    pub fn from_draws(id: u64, label: usize, attacked: bool, draws: &[DrawOutcome]) -> Self {
        let n = draws.len().max(1) as f64;
        let mean = |f: &dyn Fn(&DrawOutcome) -> f64| draws.iter().map(f).sum::<f64>() / n;
        Self {
            id,
            label,
            attacked,
            clean_correct: mean(&|d| ind(d.clean_correct)),
            clean_accepted: mean(&|d| ind(d.clean_accepted)),
            adv_correct: mean(&|d| ind(d.adv_correct)),
            adv_accepted: mean(&|d| ind(d.adv_accepted)),
            success: mean(&|d| ind(!d.adv_correct && d.adv_accepted)),
            rerr_num: mean(&|d| {
                ind(!d.clean_correct && d.clean_accepted).max(ind(!d.adv_correct && d.adv_accepted))
            }),
            rerr_den: mean(&|d| ind(d.clean_accepted).max(ind(d.adv_accepted))),
            queries: 0,
            winner: None,
            timed_out: false,
        }
    }
}

/// Empirical robust error: the sum of the max terms over the sum of the
/// acceptance terms. Returns 0 with `true` when every sample was rejected.
pub fn rerr_empirical(records: &[SampleRecord]) -> (f64, bool) {
    let num: f64 = records.iter().map(|r| r.rerr_num).sum();
    let den: f64 = records.iter().map(|r| r.rerr_den).sum();
    if den == 0.0 {
        (0.0, true)
    } else {
        (num / den, false)
    }
}

/// Success rate among attacked samples; None when no sample was attacked.
pub fn asr(records: &[SampleRecord]) -> Option<f64> {
    let attacked: Vec<&SampleRecord> = records.iter().filter(|r| r.attacked).collect();
    if attacked.is_empty() {
        return None;
    }
    Some(attacked.iter().map(|r| r.success).sum::<f64>() / attacked.len() as f64)
}

/// Robust accuracy over the attacked samples only.
pub fn robust_accuracy_attacked(records: &[SampleRecord]) -> Option<f64> {
    let attacked: Vec<SampleRecord> = records.iter().filter(|r| r.attacked).cloned().collect();
    if attacked.is_empty() {
        return None;
    }
    Some(1.0 - rerr_empirical(&attacked).0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub samples: usize,
    pub attacked: usize,
    pub clean_accuracy: f64,
    pub rerr: f64,
    pub robust_accuracy: f64,
    pub asr: Option<f64>,
    /// Every sample was rejected by the detector on both inputs.
    pub all_rejected: bool,
}

impl Aggregates {
    pub fn from_records(records: &[SampleRecord]) -> Self {
        let (rerr, all_rejected) = rerr_empirical(records);
        let n = records.len();
        Self {
            samples: n,
            attacked: records.iter().filter(|r| r.attacked).count(),
            clean_accuracy: if n == 0 {
                0.0
            } else {
                records.iter().map(|r| r.clean_correct).sum::<f64>() / n as f64
            },
            rerr,
            robust_accuracy: 1.0 - rerr,
            asr: asr(records),
            all_rejected,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub eps: f64,
    pub seed: u64,
    /// Draws per sample for randomized models; deterministic models use 1.
    pub draws: usize,
    pub budget: Budget,
    #[serde(skip)]
    pub jobs: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            eps: 8.0 / 255.0,
            seed: 0,
            draws: 10,
            budget: Budget::seconds(1.0),
            jobs: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub program: String,
    pub dataset: String,
    pub options: EvalOptions,
    /// Effective draws per sample.
    pub draws: usize,
    pub aggregates: Aggregates,
    pub records: Vec<SampleRecord>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalTiming {
    pub total_seconds: f64,
    /// Attack seconds per sample, in record order.
    pub sample_seconds: Vec<f64>,
}

fn observe(f: &Classifier, x: &Tensor, y: usize, rng: &mut crate::rng::Stream) -> Result<(bool, bool)> {
    let pass = f.forward(x, rng)?;
    let accepted = f.detector.is_none_or(|d| d.accepts(&pass.probs));
    Ok((pass.logits.argmax() == y, accepted))
}

/// Runs the program on every sample and judges the results on `f`.
///
/// Samples misclassified at attack time are not attacked. A sample the
/// program fails to break keeps its clean input, so extending a program
/// can only raise the error. Randomized models are re-evaluated `draws`
/// times on the same points.
pub fn evaluate(
    f: &Classifier,
    surrogate: &Graph,
    program: &AttackProgram,
    data: &Dataset,
    options: &EvalOptions,
) -> Result<(EvalReport, EvalTiming)> {
    let started = Instant::now();
    let draws = if f.is_randomized() { options.draws.max(1) } else { 1 };
    let ctx = AttackContext {
        model: f,
        surrogate,
        eps: options.eps,
        budget: options.budget,
    };
    let seed = options.seed;
    let indexed: Vec<(u64, usize)> = (0..data.len()).map(|i| (i as u64, i)).collect();
    let rows = parallel::map(options.jobs, &indexed, |&(id, i)| -> Result<(SampleRecord, f64)> {
        let s = &data.samples[i];
        let (first_correct, _) = observe(f, &s.x, s.y, &mut stream(seed, &[purpose::DRAWS, id, 0]))?;
        let t = Instant::now();
        let (x_adv, queries, winner, timed_out) = if first_correct {
            let seq = run_sequence(&ctx, &program.attacks, &s.x, s.y, seed, id)?;
            let x_adv = if seq.outcome.success { Some(seq.outcome.x_adv) } else { None };
            (x_adv, seq.outcome.queries, seq.winner, seq.outcome.timed_out)
        } else {
            (None, 0, None, false)
        };
        let seconds = t.elapsed().as_secs_f64();
        let mut outcomes = Vec::with_capacity(draws);
        for d in 0..draws {
            let (cc, ca) = observe(f, &s.x, s.y, &mut stream(seed, &[purpose::DRAWS, id, d as u64]))?;
            let (ac, aa) = match &x_adv {
                Some(xa) => observe(f, xa, s.y, &mut stream(seed, &[purpose::DRAWS, id, d as u64, 1]))?,
                None => (cc, ca),
            };
            outcomes.push(DrawOutcome {
                clean_correct: cc,
                clean_accepted: ca,
                adv_correct: ac,
                adv_accepted: aa,
            });
        }
        let mut r = SampleRecord::from_draws(id, s.y, first_correct, &outcomes);
        r.queries = queries;
        r.winner = winner;
        r.timed_out = timed_out;
        Ok((r, seconds))
    });
    let mut records = Vec::with_capacity(rows.len());
    let mut sample_seconds = Vec::with_capacity(rows.len());
    for row in rows {
        let (r, s) = row?;
        records.push(r);
        sample_seconds.push(s);
    }
    let report = EvalReport {
        program: format(program),
        dataset: data.name.clone(),
        options: options.clone(),
        draws,
        aggregates: Aggregates::from_records(&records),
        records,
    };
    let timing = EvalTiming {
        total_seconds: started.elapsed().as_secs_f64(),
        sample_seconds,
    };
    Ok((report, timing))
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self).map_err(|e| crate::Error::Config(e.to_string()))? + "\n")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "id,label,attacked,clean_correct,clean_accepted,adv_correct,adv_accepted,success,rerr_num,rerr_den,queries,winner,timed_out\n",
        );
        for r in &self.records {
            let winner = r.winner.map(|w| w.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.id,
                r.label,
                r.attacked,
                r.clean_correct,
                r.clean_accepted,
                r.adv_correct,
                r.adv_accepted,
                r.success,
                r.rerr_num,
                r.rerr_den,
                r.queries,
                winner,
                r.timed_out
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let a = &self.aggregates;
        let mut s = String::new();
        let _ = writeln!(s, "dataset          {}", self.dataset);
        let _ = writeln!(s, "eps              {}", self.options.eps);
        let _ = writeln!(s, "seed             {}", self.options.seed);
        let _ = writeln!(s, "draws            {}", self.draws);
        let _ = writeln!(s, "samples          {}", a.samples);
        let _ = writeln!(s, "attacked         {}", a.attacked);
        let _ = writeln!(s, "clean accuracy   {:.4}", a.clean_accuracy);
        let _ = writeln!(s, "robust error     {:.4}", a.rerr);
        let _ = writeln!(s, "robust accuracy  {:.4}", a.robust_accuracy);
        match a.asr {
            Some(v) => {
                let _ = writeln!(s, "attack success   {v:.4}");
            }
            None => {
                let _ = writeln!(s, "attack success   undefined (no sample attacked)");
            }
        }
        if a.all_rejected {
            let _ = writeln!(s, "warning: the detector rejected every sample");
        }
        let _ = writeln!(s, "program:");
        for line in self.program.lines() {
            let _ = writeln!(s, "  {line}");
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:>6} {:>5} {:>8} {:>7} {:>7} {:>7} {:>8} {:>6}", "id", "label", "attacked", "clean", "adv", "success", "queries", "winner");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{:>6} {:>5} {:>8} {:>7.3} {:>7.3} {:>7.3} {:>8} {:>6}",
                r.id,
                r.label,
                if r.attacked { "yes" } else { "no" },
                r.clean_correct,
                r.adv_correct,
                r.success,
                r.queries,
                r.winner.map(|w| w.to_string()).unwrap_or_else(|| "-".into())
            );
        }
        s
    }
}
