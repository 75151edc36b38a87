//! Backbone attack algorithms. Each runs against the surrogate through an
//! [`Oracle`] and returns its chosen point together with the objective
//! value there; deciding success on the original model happens upstream.

use rand::Rng;
use rand_distr::StandardNormal;

use super::oracle::{tap_of, Oracle};
use super::spec::AttackSpec;
use crate::error::Result;
use crate::graph::{Graph, Tap};
use crate::loss::{enumerate_targets, objective_at_tap, Direction, LossRefs, LossSpec};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

/// Everything a backbone needs to know about the sample it attacks.
pub struct Problem<'a> {
    pub x0: &'a Tensor,
    pub y: usize,
    pub target: Option<usize>,
    pub eps: f64,
    pub spec: &'a AttackSpec,
    pub refs: &'a LossRefs,
    /// Start uniformly at random inside the feasible set.
    pub random_start: bool,
}

pub struct Found {
    pub x: Tensor,
    pub objective: f64,
}

impl Problem<'_> {
    fn loss(&self) -> &LossSpec {
        &self.spec.loss
    }

    fn eot(&self) -> u32 {
        self.spec.eot
    }

    fn start(&self, rng: &mut Stream) -> Tensor {
        let mut x = self.x0.clone();
        if self.random_start {
            for v in x.data_mut() {
                *v += rng.random_range(-self.eps..=self.eps);
            }
            project(&mut x, self.x0, self.eps);
        }
        x
    }

    fn grad(&self, o: &mut Oracle, x: &Tensor) -> Result<(f64, Tensor, usize)> {
        let (v, g, pass) = o.objective_grad(x, self.y, self.target, self.loss(), self.refs, self.eot())?;
        Ok((v, g, pass.logits.argmax()))
    }

    fn value(&self, o: &mut Oracle, x: &Tensor) -> Result<(f64, usize)> {
        let (v, pass) = o.objective(x, self.y, self.target, self.loss(), self.refs, self.eot())?;
        Ok((v, pass.logits.argmax()))
    }

    /// Whether a surrogate prediction already realizes the attack goal.
    fn fooled(&self, pred: usize) -> bool {
        match self.target {
            Some(t) if self.loss().direction != Direction::U => pred == t,
            _ => pred != self.y,
        }
    }
}

/// Clamps `x` onto the L-infinity ball around `x0` intersected with [0, 1].
pub fn project(x: &mut Tensor, x0: &Tensor, eps: f64) {
    for (v, c) in x.data_mut().iter_mut().zip(x0.data()) {
        let lo = (c - eps).max(0.0);
        let hi = (c + eps).min(1.0);
        *v = v.clamp(lo.min(hi), hi.max(lo));
    }
}

fn signed_step(x: &Tensor, g: &Tensor, step: f64) -> Tensor {
    let mut out = x.clone();
    for (v, d) in out.data_mut().iter_mut().zip(g.data()) {
        *v += step * sign(*d);
    }
    out
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn fgsm(o: &mut Oracle, p: &Problem, rng: &mut Stream) -> Result<Found> {
    let x = p.start(rng);
    let (_, g, _) = p.grad(o, &x)?;
    let mut x = signed_step(&x, &g, p.eps);
    project(&mut x, p.x0, p.eps);
    let (objective, _) = p.value(o, &x)?;
    Ok(Found { x, objective })
}

pub fn pgd(o: &mut Oracle, p: &Problem, rng: &mut Stream) -> Result<Found> {
    let steps = p.spec.int_param("step");
    let alpha = p.spec.param("rel_stepsize") * p.eps;
    let mut x = p.start(rng);
    for _ in 0..steps {
        if o.exhausted() {
            break;
        }
        let (_, g, _) = p.grad(o, &x)?;
        x = signed_step(&x, &g, alpha);
        project(&mut x, p.x0, p.eps);
    }
    let (objective, _) = p.value(o, &x)?;
    Ok(Found { x, objective })
}

/// Iterations at which APGD reconsiders its step size.
pub fn apgd_checkpoints(n_iter: usize) -> Vec<usize> {
    let n = n_iter as f64;
    let mut ps: Vec<f64> = vec![0.0, 0.22];
    loop {
        let k = ps.len();
        let next = ps[k - 1] + (ps[k - 1] - ps[k - 2] - 0.03).max(0.06);
        if next > 1.0 {
            break;
        }
        ps.push(next);
    }
    let mut out: Vec<usize> = ps[1..]
        .iter()
        .map(|p| (p * n - 1e-9).ceil() as usize)
        .filter(|&w| w < n_iter)
        .collect();
    out.dedup();
    out
}

/// PGD with momentum and step-size halving at checkpoints; returns the
/// best iterate seen.
pub fn apgd(o: &mut Oracle, p: &Problem, rng: &mut Stream) -> Result<Found> {
    const ALPHA: f64 = 0.75;
    let n_iter = p.spec.int_param("n_iter").max(1);
    let rho = p.spec.param("rho");
    let checkpoints = apgd_checkpoints(n_iter);
    let mut eta = 2.0 * p.eps;

    let x0 = p.start(rng);
    let (f0, g0, _) = p.grad(o, &x0)?;
    let mut best = (f0, x0.clone());
    let mut x_prev = x0.clone();
    let mut x = signed_step(&x0, &g0, eta);
    project(&mut x, p.x0, p.eps);
    let mut f_prev = f0;

    let mut improved = 0usize;
    let mut last_check = 0usize;
    let mut eta_at_check = eta;
    let mut best_at_check = f0;
    let mut next_cp = 0usize;
    for k in 1..n_iter {
        if o.exhausted() {
            break;
        }
        let (fk, gk, _) = p.grad(o, &x)?;
        if fk > f_prev {
            improved += 1;
        }
        if fk > best.0 {
            best = (fk, x.clone());
        }
        f_prev = fk;
        let mut z = signed_step(&x, &gk, eta);
        project(&mut z, p.x0, p.eps);
        let mut x_next = x.clone();
        for ((n, (zi, xi)), pi) in x_next
            .data_mut()
            .iter_mut()
            .zip(z.data().iter().zip(x.data()))
            .zip(x_prev.data())
        {
            *n = xi + ALPHA * (zi - xi) + (1.0 - ALPHA) * (xi - pi);
        }
        project(&mut x_next, p.x0, p.eps);
        x_prev = x;
        x = x_next;
        if next_cp < checkpoints.len() && k == checkpoints[next_cp] {
            let span = (k - last_check) as f64;
            let few_improvements = (improved as f64) < rho * span;
            let stalled = eta == eta_at_check && best.0 == best_at_check;
            eta_at_check = eta;
            best_at_check = best.0;
            if few_improvements || stalled {
                eta /= 2.0;
                x = best.1.clone();
                x_prev = best.1.clone();
            }
            improved = 0;
            last_check = k;
            next_cp += 1;
        }
    }
    Ok(Found {
        x: best.1,
        objective: best.0,
    })
}

/// Classes a boundary-seeking attack may steer toward.
fn boundary_classes(o: &mut Oracle, p: &Problem) -> Result<Vec<usize>> {
    if let Some(t) = p.target {
        return Ok(vec![t]);
    }
    let k = o.graph().num_classes();
    let n = if p.loss().direction == Direction::U {
        k - 1
    } else {
        p.loss().ntargets.clamp(1, k - 1)
    };
    let probs = o.forward(p.x0)?.probs;
    enumerate_targets(&probs, p.y, n)
}

/// References for a target the backbone picked itself.
fn refs_for(p: &Problem, t: usize) -> LossRefs {
    match (&p.refs.target, &p.refs.clean) {
        (None, Some(clean)) => LossRefs {
            clean: Some(clean.clone()),
            target: Some(swapped_reference(clean, p.y, t)),
        },
        _ => p.refs.clone(),
    }
}

/// Linearized distance to each class boundary: returns the value of the
/// class-difference function and its input gradient for the closest class.
fn closest_boundary(
    o: &mut Oracle,
    p: &Problem,
    x: &Tensor,
    classes: &[usize],
    loss: &LossSpec,
) -> Result<Option<(f64, Tensor, usize)>> {
    let pass = o.forward(x)?;
    let pred = pass.logits.argmax();
    if p.fooled(pred) {
        return Ok(None);
    }
    let mut best: Option<(f64, f64, Tensor)> = None;
    for &k in classes {
        let refs = refs_for(p, k);
        let (fk, gz) = objective_at_tap(tap_of(&pass, loss.tap), p.y, Some(k), loss, &refs)?;
        let w = o.backward(&pass, &gz, loss.tap)?;
        let norm = w.l1_norm();
        if norm == 0.0 {
            continue;
        }
        let r = fk.abs() / norm;
        if best.as_ref().is_none_or(|b| r < b.0) {
            best = Some((r, fk, w));
        }
    }
    Ok(Some(match best {
        Some((_, f, w)) => (f, w, pred),
        None => (0.0, Tensor::zeros(x.shape()), pred),
    }))
}

pub const DEEPFOOL_STEPS: usize = 50;
pub const DEEPFOOL_OVERSHOOT: f64 = 0.02;

/// L-infinity DeepFool on the difference loss.
pub fn deepfool(o: &mut Oracle, p: &Problem, rng: &mut Stream) -> Result<Found> {
    let classes = boundary_classes(o, p)?;
    let loss = LossSpec {
        direction: Direction::D,
        ..*p.loss()
    };
    let start = p.start(rng);
    let mut r_tot = vec![0.0; start.len()];
    let mut x = start.clone();
    for _ in 0..DEEPFOOL_STEPS {
        if o.exhausted() {
            break;
        }
        let Some((f, w, _)) = closest_boundary(o, p, &x, &classes, &loss)? else {
            break;
        };
        let norm = w.l1_norm();
        if norm == 0.0 {
            break;
        }
        let scale = (f.abs() + 1e-4) / norm;
        for (r, d) in r_tot.iter_mut().zip(w.data()) {
            *r += scale * sign(*d);
        }
        for ((v, s), r) in x.data_mut().iter_mut().zip(start.data()).zip(&r_tot) {
            *v = s + (1.0 + DEEPFOOL_OVERSHOOT) * r;
        }
        project(&mut x, p.x0, p.eps);
    }
    let t = p.target.or(classes.first().copied());
    let refs = t.map(|t| refs_for(p, t)).unwrap_or_else(|| p.refs.clone());
    let (objective, _) = o.objective(&x, p.y, t, &loss, &refs, 1)?;
    Ok(Found { x, objective })
}

/// Boundary projection with extrapolation (`eta`) and backtracking toward
/// the original input (`beta`), keeping the smallest adversarial point.
pub fn fab(o: &mut Oracle, p: &Problem, rng: &mut Stream) -> Result<Found> {
    const ALPHA_MAX: f64 = 0.1;
    let n_iter = p.spec.int_param("n_iter");
    let eta = p.spec.param("eta");
    let beta = p.spec.param("beta");
    let classes = boundary_classes(o, p)?;
    let loss = LossSpec {
        direction: Direction::D,
        ..*p.loss()
    };
    let x_orig = p.x0;
    let mut x = p.start(rng);
    let mut best: Option<(f64, Tensor)> = None;
    for _ in 0..n_iter {
        if o.exhausted() {
            break;
        }
        let Some((f, w, _)) = closest_boundary(o, p, &x, &classes, &loss)? else {
            let d = x.linf_distance(x_orig);
            if best.as_ref().is_none_or(|b| d < b.0) {
                best = Some((d, x.clone()));
            }
            for (v, c) in x.data_mut().iter_mut().zip(x_orig.data()) {
                *v = (1.0 - beta) * c + beta * *v;
            }
            continue;
        };
        let norm = w.l1_norm();
        if norm == 0.0 {
            break;
        }
        let f_orig = f + w
            .data()
            .iter()
            .zip(x_orig.data().iter().zip(x.data()))
            .map(|(wi, (a, b))| wi * (a - b))
            .sum::<f64>();
        let s = f.abs() / norm;
        let s_orig = f_orig.abs() / norm;
        let alpha = if s + s_orig > 0.0 {
            (s / (s + s_orig)).min(ALPHA_MAX)
        } else {
            0.0
        };
        for ((v, c), d) in x.data_mut().iter_mut().zip(x_orig.data()).zip(w.data()) {
            let step = (1.0 - alpha) * (*v + eta * s * sign(*d)) + alpha * (c + eta * s_orig * sign(*d));
            *v = step.clamp(0.0, 1.0);
        }
    }
    let mut x = best.map(|b| b.1).unwrap_or(x);
    project(&mut x, x_orig, p.eps);
    let (objective, _) = p.value(o, &x)?;
    Ok(Found { x, objective })
}

/// Simplified Carlini-Wagner: gradient descent on
/// `||x - x0||^2 + c * max(confidence - objective, 0)` with a halving and
/// doubling line search and a binary search over `c`. The result is
/// projected onto the threat model at the end.
pub fn cw(o: &mut Oracle, p: &Problem, rng: &mut Stream) -> Result<Found> {
    let confidence = p.spec.param("confidence");
    let max_iter = p.spec.int_param("max_iter");
    let search_steps = p.spec.int_param("binary_search_steps");
    let lr0 = p.spec.param("learning_rate");
    let max_halving = p.spec.int_param("max_halving");
    let max_doubling = p.spec.int_param("max_doubling");

    let total = |o: &mut Oracle, x: &Tensor, c: f64| -> Result<(f64, f64)> {
        let (obj, _) = p.value(o, x)?;
        let dist: f64 = x.data().iter().zip(p.x0.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok((dist + c * (confidence - obj).max(0.0), obj))
    };

    let (mut c, mut lo, mut hi) = (0.01, 0.0, f64::INFINITY);
    let mut best: Option<(f64, Tensor)> = None;
    let mut last = p.x0.clone();
    'search: for _ in 0..search_steps {
        let mut x = p.start(rng);
        let mut lr = lr0;
        let mut succeeded = false;
        for _ in 0..max_iter {
            if o.exhausted() {
                break 'search;
            }
            let (obj, g_obj, _) = p.grad(o, &x)?;
            let dist: f64 = x.data().iter().zip(p.x0.data()).map(|(a, b)| (a - b) * (a - b)).sum();
            if obj >= confidence {
                succeeded = true;
                if best.as_ref().is_none_or(|b| dist < b.0) {
                    best = Some((dist, x.clone()));
                }
            }
            let active = confidence - obj > 0.0;
            let current = dist + if active { c * (confidence - obj) } else { 0.0 };
            let mut grad = x.clone();
            for ((gv, xi), (x0, go)) in grad
                .data_mut()
                .iter_mut()
                .zip(x.data())
                .zip(p.x0.data().iter().zip(g_obj.data()))
            {
                *gv = 2.0 * (xi - x0) - if active { c * go } else { 0.0 };
            }
            let step = |lr: f64| {
                let mut n = x.clone();
                for (v, g) in n.data_mut().iter_mut().zip(grad.data()) {
                    *v = (*v - lr * g).clamp(0.0, 1.0);
                }
                n
            };
            let mut cand = step(lr);
            let (mut val, _) = total(o, &cand, c)?;
            if val < current {
                for _ in 0..max_doubling {
                    let next = step(lr * 2.0);
                    let (v2, _) = total(o, &next, c)?;
                    if v2 >= val {
                        break;
                    }
                    lr *= 2.0;
                    cand = next;
                    val = v2;
                }
            } else {
                let mut found = false;
                for _ in 0..max_halving {
                    lr /= 2.0;
                    cand = step(lr);
                    let (v2, _) = total(o, &cand, c)?;
                    if v2 < current {
                        found = true;
                        break;
                    }
                }
                if !found {
                    break;
                }
            }
            x = cand;
        }
        last = x;
        if succeeded {
            hi = c;
            c = 0.5 * (lo + hi);
        } else {
            lo = c;
            c = if hi.is_finite() { 0.5 * (lo + hi) } else { c * 10.0 };
        }
    }
    let mut x = best.map(|b| b.1).unwrap_or(last);
    project(&mut x, p.x0, p.eps);
    let (objective, _) = p.value(o, &x)?;
    Ok(Found { x, objective })
}

/// Fraction of pixels changed per square at iteration `i`, following the
/// schedule of the reference Square Attack implementation.
pub fn sqr_p_selection(p_init: f64, i: usize, n_queries: usize) -> f64 {
    let it = (i as f64 / n_queries.max(1) as f64 * 10000.0) as usize;
    let div = match it {
        0..=10 => 1.0,
        11..=50 => 2.0,
        51..=200 => 4.0,
        201..=500 => 8.0,
        501..=1000 => 16.0,
        1001..=2000 => 32.0,
        2001..=4000 => 64.0,
        4001..=6000 => 128.0,
        6001..=8000 => 256.0,
        _ => 512.0,
    };
    p_init / div
}

/// Seed used by SQR when randomization is off.
const SQR_FIXED_SEED: u64 = 0x5351_5221;

/// L-infinity Square Attack: random search over square patches at the
/// corners of the ball, accepting changes that raise the objective.
pub fn sqr(o: &mut Oracle, p: &Problem, rng: &mut Stream) -> Result<Found> {
    let n_queries = p.spec.int_param("n_queries");
    let p_init = p.spec.param("p_init");
    let mut fixed = stream(SQR_FIXED_SEED, &[]);
    let rng: &mut Stream = if p.spec.randomize { rng } else { &mut fixed };
    let (c, h, w) = crate::graph::as_image(p.x0.shape());
    let eps = p.eps;

    let mut delta = vec![0.0; c * h * w];
    for ch in 0..c {
        for col in 0..w {
            let s = if rng.random::<bool>() { eps } else { -eps };
            for row in 0..h {
                delta[(ch * h + row) * w + col] = s;
            }
        }
    }
    let apply = |delta: &[f64]| {
        let mut x = p.x0.clone();
        for (v, d) in x.data_mut().iter_mut().zip(delta) {
            *v += d;
        }
        project(&mut x, p.x0, eps);
        x
    };
    let mut x_best = apply(&delta);
    let (mut f_best, mut pred) = p.value(o, &x_best)?;
    let mut i = 1;
    while i < n_queries {
        if p.fooled(pred) || o.exhausted() {
            break;
        }
        let frac = sqr_p_selection(p_init, i, n_queries);
        let (sh, sw) = if h > 1 {
            let s = ((frac * (h * w) as f64).sqrt().round() as usize).clamp(1, h.min(w));
            (s, s)
        } else {
            (1, ((frac * w as f64).round() as usize).clamp(1, w))
        };
        let r0 = rng.random_range(0..=h - sh);
        let c0 = rng.random_range(0..=w - sw);
        let mut cand = delta.clone();
        for ch in 0..c {
            let s = if rng.random::<bool>() { eps } else { -eps };
            for r in r0..r0 + sh {
                for col in c0..c0 + sw {
                    cand[(ch * h + r) * w + col] = s;
                }
            }
        }
        let x = apply(&cand);
        let (f, pr) = p.value(o, &x)?;
        if f > f_best {
            f_best = f;
            x_best = x;
            delta = cand;
            pred = pr;
        }
        i += p.eot().max(1) as usize;
    }
    Ok(Found {
        x: x_best,
        objective: f_best,
    })
}

/// Sampling scale of the NES estimator relative to the budget.
pub const NES_SIGMA_FRACTION: f64 = 0.25;

/// Natural evolution strategies: antithetic Gaussian gradient estimates
/// followed by signed projected steps.
pub fn nes(o: &mut Oracle, p: &Problem, rng: &mut Stream) -> Result<Found> {
    let steps = p.spec.int_param("step");
    let alpha = p.spec.param("rel_stepsize") * p.eps;
    let pairs = (p.spec.int_param("n_samples") / 2).max(1);
    let sigma = (NES_SIGMA_FRACTION * p.eps).max(1e-3);
    let mut x = p.start(rng);
    'outer: for _ in 0..steps {
        let mut g = Tensor::zeros(x.shape());
        for _ in 0..pairs {
            if o.exhausted() {
                break 'outer;
            }
            let u: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
            let shifted = |s: f64| {
                let mut t = x.clone();
                for (v, ui) in t.data_mut().iter_mut().zip(&u) {
                    *v += s * sigma * ui;
                }
                t
            };
            let (fp, _) = p.value(o, &shifted(1.0))?;
            let (fm, _) = p.value(o, &shifted(-1.0))?;
            for (gi, ui) in g.data_mut().iter_mut().zip(&u) {
                *gi += (fp - fm) * ui;
            }
        }
        x = signed_step(&x, &g, alpha);
        project(&mut x, p.x0, p.eps);
    }
    let (objective, _) = p.value(o, &x)?;
    Ok(Found { x, objective })
}

/// Runs the backbone named by `p.spec`.
pub fn run_backbone(o: &mut Oracle, p: &Problem, rng: &mut Stream) -> Result<Found> {
    use super::spec::Backbone::*;
    match p.spec.backbone {
        FGSM => fgsm(o, p, rng),
        PGD => pgd(o, p, rng),
        APGD => apgd(o, p, rng),
        DeepFool => deepfool(o, p, rng),
        CW => cw(o, p, rng),
        FAB => fab(o, p, rng),
        SQR => sqr(o, p, rng),
        NES => nes(o, p, rng),
    }
}

/// Clean tap output of `graph` with entries `y` and `t` swapped: the
/// reference a targeted logit-matching loss pulls toward.
pub fn swapped_reference(clean: &Tensor, y: usize, t: usize) -> Tensor {
    let mut r = clean.clone();
    r.data_mut().swap(y, t);
    r
}

pub fn tap_output(graph: &Graph, x: &Tensor, tap: Tap, rng: &mut Stream) -> Result<Tensor> {
    let pass = graph.forward(x, rng)?;
    Ok(tap_of(&pass, tap).clone())
}
