//! Transformation search, trial scoring and greedy sequence construction.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::score_serde;
use super::sha::{successive_halving, Rung};
use super::space::AttackSpace;
use super::tpe::{Tpe, TpeConfig};
use crate::attack::{attack_stream, run_attack, AttackContext, AttackSpec, Backbone, Budget};
use crate::dsl::{format, format_attack, AttackProgram};
use crate::error::{Error, Result};
use crate::graph::{
    apply_transform, list_bpda_candidates, list_removal_candidates, train_bpda_approximator, BpdaKind, Graph, Tap,
    TrainingOptions, TransformPolicy, VertexId,
};
use crate::loss::{clipped_ce, LossKind, LossSpec};
use crate::model::{Classifier, Dataset, Sample};
use crate::parallel;
use crate::rng::{purpose, stream};

/// Per-sample cross-entropy is clipped to this before entering the score.
pub const CE_CLIP: f64 = 10.0;

/// Samples tagged with their dataset index; the index keys every stream.
pub type EvalSet = Vec<(u64, Sample)>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Sequence length.
    pub m: usize,
    /// Trials per round.
    pub k: usize,
    /// Initial sample-set size per round.
    pub n: usize,
    /// Weight of the cross-entropy tie-breaker.
    pub lambda: f64,
    pub eps: f64,
    /// T_c: wall-clock limit per sample and attack.
    pub budget_seconds: Option<f64>,
    /// Query limit per sample and attack (the deterministic budget).
    pub budget_queries: Option<u64>,
    pub seed: u64,
    /// Backbones the search may pick; empty means the default set.
    pub backbones: Vec<Backbone>,
    pub tpe: TpeConfig,
    pub bpda_epochs: usize,
    /// Worker threads; never affects results.
    #[serde(skip)]
    pub jobs: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            m: 3,
            k: 64,
            n: 100,
            lambda: 0.01,
            eps: 8.0 / 255.0,
            budget_seconds: Some(1.0),
            budget_queries: None,
            seed: 0,
            backbones: Vec::new(),
            tpe: TpeConfig::default(),
            bpda_epochs: 10,
            jobs: 0,
        }
    }
}

impl SearchConfig {
    /// Scaled-down sizes for quick runs.
    pub fn desk() -> Self {
        Self {
            m: 2,
            k: 16,
            n: 50,
            ..Self::default()
        }
    }

    pub fn budget(&self) -> Budget {
        Budget {
            seconds: self.budget_seconds,
            queries: self.budget_queries,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.m == 0 || self.k == 0 || self.n == 0 {
            return bad(format!("m, k and n must be at least 1 (got {}, {}, {})", self.m, self.k, self.n));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be a non-negative number, got {}", self.lambda));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return bad(format!("eps must be a non-negative number, got {}", self.eps));
        }
        if let Some(t) = self.budget_seconds {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("budget seconds must be positive, got {t}"));
            }
        }
        if self.budget_queries == Some(0) {
            return bad("budget queries must be positive".into());
        }
        if !(self.tpe.gamma > 0.0 && self.tpe.gamma <= 1.0) || self.tpe.n_candidates == 0 {
            return bad("tpe gamma must lie in (0, 1] and n_candidates must be positive".into());
        }
        Ok(())
    }

    fn space(&self, surrogate: &Graph) -> AttackSpace {
        let mut space = AttackSpace::new(surrogate.num_classes(), surrogate.is_randomized());
        if !self.backbones.is_empty() {
            space.backbones = self.backbones.clone();
        }
        space
    }
}

/// Worst-case attack time of a search: 2 m n k T_c.
pub fn time_bound(m: usize, n: usize, k: usize, t_c: f64) -> f64 {
    2.0 * (m * n * k) as f64 * t_c
}

/// The default attack: APGD with table defaults on untargeted CE.
pub fn default_attack() -> AttackSpec {
    AttackSpec::new(Backbone::APGD, LossSpec::untargeted(LossKind::CE, Tap::Probs))
}

/// Samples the model classifies correctly, checked once with a keyed
/// stream per sample.
pub fn correctly_classified(f: &Classifier, data: &Dataset, seed: u64, jobs: usize) -> Result<EvalSet> {
    let indexed: Vec<(u64, &Sample)> = data.samples.iter().enumerate().map(|(i, s)| (i as u64, s)).collect();
    let keep = parallel::map(jobs, &indexed, |(id, s)| {
        f.predict(&s.x, &mut stream(seed, &[purpose::DRAWS, *id, 0])).map(|p| p == s.y)
    });
    let mut out = Vec::new();
    for ((id, s), k) in indexed.into_iter().zip(keep) {
        if k? {
            out.push((id, s.clone()));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleResult {
    pub success: bool,
    /// Clipped cross-entropy of the original model at the returned point.
    pub ce: f64,
    pub timed_out: bool,
    pub seconds: f64,
    pub queries: u64,
}

/// Mean of `c - lambda * CE` over the samples; minus infinity if any
/// sample ran out of budget.
pub fn score_outcomes(results: &[SampleResult], lambda: f64) -> f64 {
    if results.iter().any(|r| r.timed_out) {
        return f64::NEG_INFINITY;
    }
    if results.is_empty() {
        return 0.0;
    }
    let total: f64 = results
        .iter()
        .map(|r| if r.success { 1.0 } else { 0.0 } - lambda * r.ce)
        .sum();
    total / results.len() as f64
}

/// Runs `spec` as attack `position` of a sequence on one sample.
fn run_sample(ctx: &AttackContext, spec: &AttackSpec, sample: &(u64, Sample), position: usize, seed: u64) -> Result<SampleResult> {
    let (id, s) = sample;
    let start = Instant::now();
    let out = run_attack(ctx, spec, &s.x, s.y, &mut attack_stream(seed, *id, position))?;
    let seconds = start.elapsed().as_secs_f64();
    let pass = ctx.model.forward(&out.x_adv, &mut stream(seed, &[purpose::TRIAL, *id, position as u64]))?;
    Ok(SampleResult {
        success: out.success,
        ce: clipped_ce(&pass.probs, s.y, CE_CLIP),
        timed_out: out.timed_out,
        seconds,
        queries: out.queries,
    })
}

/// Runs `spec` on every sample. Once one sample times out the remaining
/// ones are skipped (returned as None): the score is already void.
fn run_samples(
    ctx: &AttackContext,
    spec: &AttackSpec,
    samples: &[&(u64, Sample)],
    position: usize,
    seed: u64,
    jobs: usize,
    abort_on_timeout: bool,
) -> Result<Vec<Option<SampleResult>>> {
    let abort = AtomicBool::new(false);
    let results = parallel::map(jobs, samples, |s| {
        if abort.load(Ordering::Relaxed) {
            return Ok(None);
        }
        let r = run_sample(ctx, spec, s, position, seed)?;
        if r.timed_out && abort_on_timeout {
            abort.store(true, Ordering::Relaxed);
        }
        Ok(Some(r))
    });
    results.into_iter().collect()
}

/// Scores `spec` on `samples`.
pub fn score(ctx: &AttackContext, spec: &AttackSpec, samples: &[(u64, Sample)], position: usize, seed: u64, lambda: f64, jobs: usize) -> Result<f64> {
    let refs: Vec<&(u64, Sample)> = samples.iter().collect();
    let rs = run_samples(ctx, spec, &refs, position, seed, jobs, true)?;
    if rs.iter().any(|r| r.is_none()) {
        return Ok(f64::NEG_INFINITY);
    }
    let rs: Vec<SampleResult> = rs.into_iter().flatten().collect();
    Ok(score_outcomes(&rs, lambda))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformEval {
    pub vertex: VertexId,
    pub choice: String,
    #[serde(with = "score_serde")]
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformReport {
    /// The selected policy in short form.
    pub summary: String,
    #[serde(with = "score_serde")]
    pub native_score: f64,
    #[serde(with = "score_serde")]
    pub final_score: f64,
    pub evaluations: Vec<TransformEval>,
    /// Trained approximators and removals; weights are not echoed.
    #[serde(skip)]
    pub policy: TransformPolicy,
}

/// Finds the surrogate transformation: each BPDA candidate gets the best of
/// identity/conv1/conv2relu under the default attack, then each removal
/// candidate is removed if that strictly improves the score.
pub fn transformation_search(f: &Classifier, samples: &[(u64, Sample)], config: &SearchConfig) -> Result<TransformReport> {
    let delta = default_attack();
    let seed = stream(config.seed, &[purpose::TRANSFORM]).next_u64();
    let eval = |policy: &TransformPolicy| -> Result<f64> {
        let surrogate = apply_transform(&f.graph, policy)?;
        let ctx = AttackContext {
            model: f,
            surrogate: &surrogate,
            eps: config.eps,
            budget: config.budget(),
        };
        score(&ctx, &delta, samples, 0, seed, config.lambda, config.jobs)
    };
    let inputs: Vec<_> = samples.iter().map(|(_, s)| s.x.clone()).collect();
    let mut policy = TransformPolicy::default();
    let native = eval(&policy)?;
    let mut current = native;
    let mut evaluations = Vec::new();

    for v in list_bpda_candidates(&f.graph) {
        let mut best: Option<(f64, TransformPolicy)> = None;
        for kind in BpdaKind::ALL {
            let options = TrainingOptions {
                epochs: config.bpda_epochs,
                seed,
                ..TrainingOptions::default()
            };
            let trained = train_bpda_approximator(&f.graph, v, kind, &inputs, &options)?;
            let mut candidate = policy.clone();
            candidate.bpda.insert(v, trained.approximator);
            let s = eval(&candidate)?;
            evaluations.push(TransformEval {
                vertex: v,
                choice: format!("bpda:{kind}"),
                score: s,
            });
            if best.as_ref().is_none_or(|b| s > b.0) {
                best = Some((s, candidate));
            }
        }
        if let Some((s, p)) = best {
            policy = p;
            current = s;
        }
    }
    for v in list_removal_candidates(&f.graph) {
        let mut candidate = policy.clone();
        candidate.removal.insert(v, true);
        let s = eval(&candidate)?;
        evaluations.push(TransformEval {
            vertex: v,
            choice: "remove".into(),
            score: s,
        });
        if s > current {
            policy = candidate;
            current = s;
        } else {
            policy.removal.insert(v, false);
        }
    }
    Ok(TransformReport {
        summary: policy.summary(),
        native_score: native,
        final_score: current,
        evaluations,
        policy,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub program: String,
    #[serde(with = "score_serde")]
    pub score: f64,
    /// Largest sample set the trial was scored on.
    pub samples_used: usize,
    pub timed_out: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    /// Correctly classified samples not yet broken by the sequence.
    pub remaining: usize,
    pub trials: Vec<Trial>,
    pub rungs: Vec<Rung>,
    pub winner: Option<usize>,
    #[serde(with = "score_serde")]
    pub winner_score: f64,
    /// Samples the winner broke among the remaining ones.
    pub broken: usize,
    /// The TPE model ran out of unseen points before k trials.
    pub exhausted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub config: SearchConfig,
    pub dataset: String,
    pub dataset_size: usize,
    pub clean_correct: usize,
    pub transform: TransformReport,
    pub rounds: Vec<RoundReport>,
    /// Winning sequence in program text.
    pub program: String,
    /// Why the search ended before m rounds, if it did.
    pub early_stop: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundTiming {
    /// Attack seconds per trial, summed over its samples.
    pub trial_seconds: Vec<f64>,
    /// Attack seconds spent removing broken samples before the round.
    pub filter_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTiming {
    pub transform_seconds: f64,
    /// Attack execution during trials and filtering, summed over samples.
    pub attack_seconds: f64,
    /// 2 m n k T_c when T_c is set.
    pub bound_seconds: Option<f64>,
    pub total_seconds: f64,
    pub rounds: Vec<RoundTiming>,
}

pub struct SearchOutcome {
    pub report: SearchReport,
    pub timing: SearchTiming,
    pub program: AttackProgram,
    pub policy: TransformPolicy,
    pub surrogate: Graph,
}

/// Per-round cache of (trial, sample id) results. Keyed streams make a
/// trial's result on a sample independent of the set it is scored in.
struct TrialCache<'a> {
    ctx: AttackContext<'a>,
    seed: u64,
    jobs: usize,
    position: usize,
    specs: Vec<AttackSpec>,
    results: HashMap<(usize, u64), SampleResult>,
    seconds: Vec<f64>,
}

impl TrialCache<'_> {
    fn score(&mut self, trial: usize, samples: &[&(u64, Sample)], lambda: f64) -> Result<f64> {
        let known: Vec<SampleResult> = samples
            .iter()
            .filter_map(|(id, _)| self.results.get(&(trial, *id)).copied())
            .collect();
        if known.iter().any(|r| r.timed_out) {
            return Ok(f64::NEG_INFINITY);
        }
        let missing: Vec<&(u64, Sample)> = samples
            .iter()
            .copied()
            .filter(|(id, _)| !self.results.contains_key(&(trial, *id)))
            .collect();
        let fresh = run_samples(&self.ctx, &self.specs[trial], &missing, self.position, self.seed, self.jobs, true)?;
        let mut complete = true;
        for (s, r) in missing.iter().zip(fresh) {
            match r {
                Some(r) => {
                    self.seconds[trial] += r.seconds;
                    self.results.insert((trial, s.0), r);
                }
                None => complete = false,
            }
        }
        let all: Vec<SampleResult> = samples
            .iter()
            .filter_map(|(id, _)| self.results.get(&(trial, *id)).copied())
            .collect();
        if !complete {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(score_outcomes(&all, lambda))
    }
}

/// The full search: transformation search, then `m` rounds of TPE trials
/// and successive halving, each appending its winner to the sequence and
/// dropping the samples it broke.
pub fn greedy_sequence_search(f: &Classifier, data: &Dataset, config: &SearchConfig) -> Result<SearchOutcome> {
    config.validate()?;
    let started = Instant::now();
    let clean = correctly_classified(f, data, config.seed, config.jobs)?;
    if clean.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let t0 = Instant::now();
    let transform = transformation_search(f, &clean, config)?;
    let transform_seconds = t0.elapsed().as_secs_f64();
    let surrogate = apply_transform(&f.graph, &transform.policy)?;
    let ctx = AttackContext {
        model: f,
        surrogate: &surrogate,
        eps: config.eps,
        budget: config.budget(),
    };
    let space = config.space(&surrogate);

    let mut remaining: Vec<&(u64, Sample)> = clean.iter().collect();
    let mut attacks: Vec<AttackSpec> = Vec::new();
    let mut rounds = Vec::new();
    let mut timing = SearchTiming {
        transform_seconds,
        bound_seconds: config.budget_seconds.map(|t| time_bound(config.m, config.n, config.k, t)),
        ..SearchTiming::default()
    };
    let mut early_stop = None;

    for j in 0..config.m {
        let mut round_timing = RoundTiming::default();
        let mut pool = remaining.clone();
        pool.shuffle(&mut stream(config.seed, &[purpose::SUBSAMPLE, j as u64]));
        let n = config.n.min(pool.len());
        let mut cache = TrialCache {
            ctx,
            seed: config.seed,
            jobs: config.jobs,
            position: j,
            specs: Vec::new(),
            results: HashMap::new(),
            seconds: Vec::new(),
        };
        let mut tpe = Tpe::new(config.tpe);
        let mut initial = Vec::new();
        let mut exhausted = false;
        for t in 0..config.k {
            let mut rng = stream(config.seed, &[purpose::TPE, j as u64, t as u64]);
            let (spec, a) = match tpe.suggest(&space, &mut rng) {
                Ok(x) => x,
                Err(Error::SpaceExhausted) => {
                    exhausted = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            cache.specs.push(spec);
            cache.seconds.push(0.0);
            let s = cache.score(t, &pool[..n], config.lambda)?;
            tpe.observe(a, s);
            initial.push(s);
        }
        let mut used = vec![n; initial.len()];
        let sha = successive_halving(&initial, pool.len(), n, |i, size| {
            used[i] = size;
            cache.score(i, &pool[..size], config.lambda)
        })?;
        let trials: Vec<Trial> = cache
            .specs
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let final_score = sha
                    .final_scores
                    .iter()
                    .find(|(t, _)| *t == i)
                    .map(|(_, s)| *s)
                    .unwrap_or(initial[i]);
                Trial {
                    index: i,
                    program: format_attack(spec),
                    score: final_score,
                    samples_used: used[i],
                    timed_out: cache.results.iter().any(|((t, _), r)| *t == i && r.timed_out),
                }
            })
            .collect();

        let mut report = RoundReport {
            round: j,
            remaining: remaining.len(),
            trials,
            rungs: sha.rungs.clone(),
            winner: sha.winner,
            winner_score: sha.winner.map(|_| sha.final_scores[0].1).unwrap_or(f64::NEG_INFINITY),
            broken: 0,
            exhausted,
        };
        let Some(w) = sha.winner else {
            round_timing.trial_seconds = cache.seconds.clone();
            timing.attack_seconds += cache.seconds.iter().sum::<f64>();
            timing.rounds.push(round_timing);
            rounds.push(report);
            early_stop = Some(format!("round {j}: every trial exceeded the budget"));
            break;
        };
        attacks.push(cache.specs[w].clone());

        // Drop the samples the winner breaks; cached results are reused.
        let missing: Vec<&(u64, Sample)> = remaining
            .iter()
            .copied()
            .filter(|(id, _)| !cache.results.contains_key(&(w, *id)))
            .collect();
        let fresh = run_samples(&ctx, &cache.specs[w], &missing, j, config.seed, config.jobs, false)?;
        for (s, r) in missing.iter().zip(fresh) {
            let r = r.expect("filtering never aborts");
            round_timing.filter_seconds += r.seconds;
            cache.results.insert((w, s.0), r);
        }
        let before = remaining.len();
        remaining.retain(|(id, _)| !cache.results[&(w, *id)].success);
        report.broken = before - remaining.len();
        round_timing.trial_seconds = cache.seconds.clone();
        timing.attack_seconds += cache.seconds.iter().sum::<f64>() + round_timing.filter_seconds;
        timing.rounds.push(round_timing);
        rounds.push(report);
        if remaining.is_empty() && j + 1 < config.m {
            early_stop = Some(format!("round {j}: no robust samples left"));
            break;
        }
    }

    let program = AttackProgram { attacks };
    timing.total_seconds = started.elapsed().as_secs_f64();
    let report = SearchReport {
        config: config.clone(),
        dataset: data.name.clone(),
        dataset_size: data.len(),
        clean_correct: clean.len(),
        transform: transform.clone(),
        rounds,
        program: format(&program),
        early_stop,
    };
    Ok(SearchOutcome {
        report,
        timing,
        program,
        policy: transform.policy,
        surrogate,
    })
}
