//! Fixtures and oracles shared by the integration tests.
#![allow(dead_code)]

use std::sync::OnceLock;

use attack_search::attack::{AttackSpec, Backbone, Budget, ParamKind};
use attack_search::dsl::{parse, AttackProgram};
use attack_search::Error;
use attack_search::graph::{Conv2d, Dense, Graph, GraphBuilder, Op, Tap};
use attack_search::loss::{loss_gradient, objective_at_tap, Direction, LossKind, LossRefs, LossSpec};
use attack_search::metrics::{evaluate, EvalOptions};
use attack_search::search::space::{Chooser, PriorChooser};
use attack_search::search::{Dim, Space, Tpe, TpeConfig};
use attack_search::model::{
    make_defended, make_fixture_dataset, train_fixture, Arch, Classifier, Dataset, Defense, Detector, FixtureKind,
    TrainConfig,
};
use attack_search::rng::{stream, Stream};
use attack_search::Tensor;
use rand::seq::IndexedRandom;
use rand::Rng;

/// Bars MLP trained for 30 epochs on 400 samples with seed 0.
pub fn base_model() -> &'static Classifier {
    static M: OnceLock<Classifier> = OnceLock::new();
    M.get_or_init(|| {
        let train = make_fixture_dataset(FixtureKind::Bars, 400, 0).unwrap();
        train_fixture(&train, Arch::Mlp, &TrainConfig::default()).unwrap()
    })
}

/// Held-out bars samples (seed 1).
pub fn test_data(n: usize) -> Dataset {
    make_fixture_dataset(FixtureKind::Bars, n, 1).unwrap()
}

pub fn defended(defenses: &[Defense], detector: Option<f64>) -> Classifier {
    make_defended(base_model(), defenses, detector.map(|t| Detector::new(t).unwrap())).unwrap()
}

pub fn quantize_model() -> Classifier {
    defended(&[Defense::Quantize { levels: 4 }], None)
}

pub fn reverse_sigmoid_model() -> Classifier {
    defended(&[Defense::ReverseSigmoid { beta: 0.7, gamma: 0.3 }], None)
}

pub fn noise_model() -> Classifier {
    defended(&[Defense::GaussianNoise { sigma: 0.05 }], None)
}

pub fn combined_model(tau: f64) -> Classifier {
    defended(
        &[Defense::Quantize { levels: 4 }, Defense::ReverseSigmoid { beta: 0.7, gamma: 0.3 }],
        Some(tau),
    )
}

fn weights(rng: &mut Stream, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn dense(rng: &mut Stream, inputs: usize, outputs: usize) -> Op {
    let s = 1.5 / (inputs as f64).sqrt();
    Op::Dense(Dense {
        inputs,
        outputs,
        weight: weights(rng, inputs * outputs, s),
        bias: weights(rng, outputs, 0.3),
    })
}

/// A small random differentiable network on `[1, 3, 3]` inputs with four
/// classes. Depending on the seed it contains a convolution, a residual
/// add and a reverse-sigmoid output layer.
pub fn random_graph(seed: u64) -> Graph {
    let mut rng = stream(seed, &[0x6772]);
    let (mut b, x) = GraphBuilder::new(&[1, 3, 3]);
    let mut cur = x;
    let mut width = 9;
    if rng.random_bool(0.5) {
        let c = b
            .add_internal(
                Op::Conv2d(Conv2d {
                    c_in: 1,
                    c_out: 2,
                    kernel: 3,
                    weight: weights(&mut rng, 18, 0.6),
                    bias: weights(&mut rng, 2, 0.2),
                }),
                &[cur],
            )
            .unwrap();
        cur = b.add_internal(Op::Relu, &[c]).unwrap();
        width = 18;
    }
    cur = b.add_internal(Op::Flatten, &[cur]).unwrap();
    let h = rng.random_range(4..8);
    let d = b.add_internal(dense(&mut rng, width, h), &[cur]).unwrap();
    cur = b.add_internal(Op::Relu, &[d]).unwrap();
    if rng.random_bool(0.5) {
        let a = b.add_internal(dense(&mut rng, h, h), &[cur]).unwrap();
        cur = b.add_internal(Op::Add, &[a, cur]).unwrap();
    }
    let logits = b.add_internal(dense(&mut rng, h, 4), &[cur]).unwrap();
    let probs = b.add_internal(Op::Softmax, &[logits]).unwrap();
    let g = b.build(logits, probs).unwrap();
    if rng.random_bool(0.5) {
        let c = make_defended(&Classifier::new(g, None), &[Defense::ReverseSigmoid { beta: 0.7, gamma: 0.3 }], None)
            .unwrap();
        c.graph
    } else {
        g
    }
}

pub fn random_input(rng: &mut Stream, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap()
}

fn tap_of(graph: &Graph, x: &Tensor, tap: Tap) -> Tensor {
    let pass = graph.forward(x, &mut stream(0, &[])).unwrap();
    match tap {
        Tap::Logits => pass.logits,
        Tap::Probs => pass.probs,
    }
}

/// The attack objective evaluated by a plain forward pass.
pub fn objective(graph: &Graph, x: &Tensor, y: usize, target: Option<usize>, spec: &LossSpec, refs: &LossRefs) -> f64 {
    objective_at_tap(&tap_of(graph, x, spec.tap), y, target, spec, refs).unwrap().0
}

/// Which linear piece of the network and loss `x` lies on: the sign of
/// every ReLU input and the ranking of the logits and probabilities.
fn piece(graph: &Graph, x: &Tensor) -> Vec<usize> {
    let pass = graph.forward(x, &mut stream(0, &[])).unwrap();
    let mut key = Vec::new();
    for v in graph.vertices() {
        if v.op == Op::Relu {
            let src = graph.position(v.inputs[0]).unwrap();
            key.extend(pass.trace.value(src).data().iter().map(|&a| usize::from(a > 0.0)));
        }
    }
    for t in [&pass.logits, &pass.probs] {
        let mut idx: Vec<usize> = (0..t.len()).collect();
        idx.sort_by(|&a, &b| t.data()[b].total_cmp(&t.data()[a]));
        key.extend(idx);
    }
    key
}

/// Central finite differences with step `h`. Coordinates whose stencil
/// crosses a kink (a ReLU sign change or a reordering of the outputs) are
/// returned as None.
pub fn finite_diff_grad(
    graph: &Graph,
    x: &Tensor,
    y: usize,
    target: Option<usize>,
    spec: &LossSpec,
    refs: &LossRefs,
    h: f64,
) -> Vec<Option<f64>> {
    let base = piece(graph, x);
    (0..x.len())
        .map(|i| {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            if piece(graph, &xp) != base || piece(graph, &xm) != base {
                return None;
            }
            let fp = objective(graph, &xp, y, target, spec, refs);
            let fm = objective(graph, &xm, y, target, spec, refs);
            Some((fp - fm) / (2.0 * h))
        })
        .collect()
}

/// max_i |a_i - fd_i| / (|fd_i| + 1e-8) over the smooth coordinates, and
/// the number of coordinates skipped at kinks.
pub fn max_relative_error(analytic: &Tensor, fd: &[Option<f64>]) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    for (a, f) in analytic.data().iter().zip(fd) {
        match f {
            Some(f) => worst = worst.max((a - f).abs() / (f.abs() + 1e-8)),
            None => skipped += 1,
        }
    }
    (worst, skipped)
}

/// Kolmogorov distribution tail P(K > x).
pub fn kolmogorov_tail(x: f64) -> f64 {
    if x < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..200 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * x * x).exp();
        s += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    s.clamp(0.0, 1.0)
}

/// One-sample Kolmogorov-Smirnov test against U(0, 1); returns (D, p).
pub fn ks_uniform(mut u: Vec<f64>) -> (f64, f64) {
    u.sort_by(f64::total_cmp);
    let n = u.len() as f64;
    let d = u
        .iter()
        .enumerate()
        .map(|(i, &v)| ((i as f64 + 1.0) / n - v).max(v - i as f64 / n))
        .fold(0.0, f64::max);
    let sn = n.sqrt();
    (d, kolmogorov_tail((sn + 0.12 + 0.11 / sn) * d))
}

pub fn all_specs() -> Vec<LossSpec> {
    let mut out = Vec::new();
    for kind in LossKind::ALL {
        for direction in [Direction::U, Direction::T, Direction::D] {
            for tap in [Tap::Logits, Tap::Probs] {
                let s = LossSpec { kind, direction, tap, ntargets: 1, kappa: None };
                if s.validate().is_ok() {
                    out.push(s);
                }
            }
        }
    }
    out
}

/// Worst relative error of every loss spec against finite differences on
/// random graph `seed`, with the skipped and total coordinate counts.
pub fn fd_sweep(seed: u64, inputs: usize) -> (f64, usize, usize) {
    let g = random_graph(seed);
    let mut rng = stream(seed, &[0x6678]);
    let mut worst: f64 = 0.0;
    let (mut skipped, mut total) = (0, 0);
    for spec in all_specs() {
        for _ in 0..inputs {
            let x = random_input(&mut rng, g.input_shape());
            let y = rand::Rng::random_range(&mut rng, 0..4);
            let target = (y + rand::Rng::random_range(&mut rng, 1..4)) % 4;
            let refs = LossRefs {
                clean: Some(random_input(&mut rng, &[4])),
                target: Some(random_input(&mut rng, &[4])),
            };
            let t = (spec.direction != Direction::U).then_some(target);
            let (_, grad, _) = loss_gradient(&g, &x, y, t, &spec, &refs, &mut stream(0, &[])).unwrap();
            let fd = finite_diff_grad(&g, &x, y, t, &spec, &refs, 1e-3);
            let (e, s) = max_relative_error(&grad, &fd);
            worst = worst.max(e);
            skipped += s;
            total += fd.len();
        }
    }
    (worst, skipped, total)
}


/// One numeric dimension on [0, 1].
pub struct Line;

impl Space for Line {
    type Point = f64;
    fn build(&self, c: &mut dyn Chooser) -> f64 {
        c.choose("x", &Dim::Num { lo: 0.0, hi: 1.0, log: false, int: false }).num()
    }
}

/// Best-of-30 on -(x - c)^2 for TPE and for random search, paired by seed.
pub fn tpe_vs_random(seed: u64) -> (f64, f64) {
    let c: f64 = stream(seed, &[0]).random_range(0.1..0.9);
    let f = |x: f64| -(x - c) * (x - c);
    let mut tpe = Tpe::new(TpeConfig::default());
    let mut rng = stream(seed, &[1]);
    let mut best_tpe = f64::NEG_INFINITY;
    for _ in 0..30 {
        let (x, a) = tpe.suggest(&Line, &mut rng).unwrap();
        best_tpe = best_tpe.max(f(x));
        tpe.observe(a, f(x));
    }
    let mut rng: Stream = stream(seed, &[2]);
    let best_random = (0..30).map(|_| f(Line.build(&mut PriorChooser { rng: &mut rng }))).fold(f64::NEG_INFINITY, f64::max);
    (best_tpe, best_random)
}


fn pad(rng: &mut Stream) -> &'static str {
    [" ", "  ", "\n  ", " \t"].choose(rng).unwrap()
}

fn number(rng: &mut Stream, v: f64, int: bool) -> String {
    if int {
        format!("{}", v as i64)
    } else if rng.random_bool(0.2) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

/// One valid attack in non-canonical spelling: random parameter subset
/// and order, optional parentheses and irregular whitespace.
fn random_attack(rng: &mut Stream) -> String {
    let b = *Backbone::ALL.choose(rng).unwrap();
    let chosen: Vec<_> = b.params().iter().filter(|_| rng.random_bool(0.6)).collect();
    let mut params: Vec<String> = chosen
        .into_iter()
        .map(|p| {
            let int = p.kind == ParamKind::Int;
            let u: f64 = rng.random();
            let mut v = if p.log { (p.lo.ln() + u * (p.hi.ln() - p.lo.ln())).exp() } else { p.lo + u * (p.hi - p.lo) };
            if int {
                v = v.round();
            }
            if rng.random_bool(0.1) {
                v = if rng.random_bool(0.5) { p.lo } else { p.hi };
            }
            format!("{}:{}{}", p.name, pad(rng), number(rng, v.clamp(p.lo, p.hi), int))
        })
        .collect();
    params.reverse();
    let mut s = format!("{b} with {{{}}}", params.join(", "));
    let caps = b.generic();
    if caps.randomize && rng.random_bool(0.4) {
        s = format!("randomize {s}");
    }
    if caps.eot_max > 1 && rng.random_bool(0.4) {
        s = format!("EOT ({s}),{}{}", pad(rng), rng.random_range(1..=caps.eot_max.min(50)));
    }
    if caps.repeat_max > 1 && rng.random_bool(0.4) {
        s = format!("repeat {s} , {}", rng.random_range(1..=caps.repeat_max.min(10)));
    }
    if rng.random_bool(0.3) {
        s = format!("try ({s}) for {}", rng.random_range(1..100) as f64 / 4.0);
    }
    if rng.random_bool(0.2) {
        s = format!("({s})");
    }
    let support = b.loss_support();
    let kinds: Vec<LossKind> = support.kinds.map(|k| k.to_vec()).unwrap_or(LossKind::ALL.to_vec());
    let kind = *kinds.choose(rng).unwrap();
    let tap = if kind == LossKind::CE { Tap::Probs } else { *support.taps.choose(rng).unwrap() };
    let tap = match tap {
        Tap::Logits => "logits",
        Tap::Probs => "probs",
    };
    let k = kind.name();
    let loss = match support.directions.choose(rng).unwrap() {
        Direction::U => format!("untargeted {k} with {tap}"),
        Direction::T => format!("targeted {k},{}{} with {tap}", pad(rng), rng.random_range(1..4)),
        Direction::D => format!("targeted {k}, {} -{}untargeted {k} with {tap}", rng.random_range(1..4), pad(rng)),
    };
    format!("{s}{}with {loss}", pad(rng))
}

pub fn random_program(rng: &mut Stream) -> String {
    let n = rng.random_range(1..4);
    let parts: Vec<String> = (0..n).map(|_| random_attack(rng)).collect();
    let mut text = parts.join(" ;\n");
    if rng.random_bool(0.3) {
        text = format!("# generated\n{text} # end");
    }
    text
}


/// Largest minus smallest Rerr over seeds 0..5 on the noise fixture.
pub fn noise_spread() -> (f64, Vec<f64>) {
    let m = noise_model();
    let data = test_data(60);
    let p = AttackProgram {
        attacks: vec![AttackSpec::new(Backbone::APGD, LossSpec::untargeted(LossKind::CE, Tap::Probs)).with_param("n_iter", 20.0)],
    };
    let values: Vec<f64> = (0..5)
        .map(|seed| {
            let o = EvalOptions { eps: 0.15, seed, draws: 10, budget: Budget::queries(400), jobs: 0 };
            evaluate(&m, &m.graph, &p, &data, &o).unwrap().0.aggregates.rerr
        })
        .collect();
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    (hi - lo, values)
}

/// (backbone, parameter, lowest, highest, just below, just above).
pub const BOUND_CASES: [(&str, &str, &str, &str, &str, &str); 6] = [
    ("PGD", "rel_stepsize", "0.001", "1", "0.000999", "1.0001"),
    ("APGD", "n_iter", "20", "500", "19", "501"),
    ("SQR", "n_queries", "1000", "8000", "999", "8001"),
    ("SQR", "p_init", "0.5", "0.9", "0.4999", "0.95"),
    ("FAB", "eta", "1", "1.2", "0.999", "1.2001"),
    ("FAB", "beta", "0.7", "1", "0.6999", "1.0001"),
];

/// Whether a single-attack program with `param: v` passes range checks.
pub fn range_ok(backbone: &str, param: &str, v: &str) -> bool {
    let loss = match backbone {
        "FAB" => "untargeted L1 with logits",
        _ => "untargeted Hinge with logits",
    };
    match parse(&format!("{backbone} with {{{param}: {v}}} with {loss}")) {
        Ok(_) => true,
        Err(Error::Range(_)) => false,
        Err(e) => panic!("unexpected error {e}"),
    }
}
