mod common;

use attack_search::attack::{attack_stream, criterion, run_attack, AttackContext, AttackSpec, Backbone, Budget};
use attack_search::rng::{purpose, stream};
use attack_search::search::space::PriorChooser;
use attack_search::search::{
    correctly_classified, greedy_sequence_search, score, successive_halving, AttackSpace, SearchConfig, Space,
    Tpe, TpeConfig,
};
use common::*;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn log_uniform_prior_is_uniform_in_log_space() {
    let space = AttackSpace { backbones: vec![Backbone::CW], num_classes: 4, randomized: false };
    let mut rng = stream(21, &[]);
    let p = Backbone::CW.param("learning_rate").unwrap();
    let u: Vec<f64> = (0..10_000)
        .map(|_| {
            let v = space.build(&mut PriorChooser { rng: &mut rng }).param("learning_rate");
            (v / p.lo).ln() / (p.hi / p.lo).ln()
        })
        .collect();
    let (d, pvalue) = ks_uniform(u.clone());
    println!("KS D = {d:.4}, p = {pvalue:.3}");
    assert!(pvalue > 0.01);
    // The same draws are far from uniform on the linear scale.
    let linear: Vec<f64> = u.iter().map(|t| (p.lo * (p.hi / p.lo).powf(*t) - p.lo) / (p.hi - p.lo)).collect();
    assert!(ks_uniform(linear).1 < 1e-6);
}

#[test]
fn tpe_prefers_a_backbone_that_always_wins() {
    let space = AttackSpace::new(4, false);
    let mut tpe = Tpe::new(TpeConfig::default());
    let mut rng = stream(22, &[]);
    for _ in 0..40 {
        let (spec, a) = tpe.suggest(&space, &mut rng).unwrap();
        tpe.observe(a, if spec.backbone == Backbone::PGD { 1.0 } else { 0.0 });
    }
    let picks = (0..1000)
        .filter(|_| tpe.suggest(&space, &mut rng).unwrap().0.backbone == Backbone::PGD)
        .count();
    let prior = 1.0 / space.backbones.len() as f64;
    println!("PGD suggested {picks}/1000, prior {prior:.3}");
    assert!(picks as f64 / 1000.0 > prior);
}

#[test]
fn tpe_beats_random_search_on_a_quadratic() {
    let wins = (0..20).filter(|&s| {
        let (t, r) = tpe_vs_random(s);
        println!("seed {s}: tpe {t:.3e} random {r:.3e}");
        t >= r
    });
    let wins = wins.count();
    println!("TPE >= random in {wins}/20 seeds");
    assert!(wins >= 12);
}

proptest! {
    #[test]
    fn sha_follows_the_quarter_schedule(k in 1usize..200, n in 1usize..80, extra in 0usize..400, seed in 0u64..1000) {
        let pool = n + extra;
        let mut rng = stream(seed, &[]);
        let initial: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        let r = successive_halving(&initial, pool, n, |i, size| Ok(initial[i] + size as f64 * 1e-6)).unwrap();
        let mut trials = k;
        let mut size = n;
        for (j, rung) in r.rungs.iter().enumerate() {
            prop_assert_eq!(rung.trials, trials);
            prop_assert_eq!(rung.samples, size);
            prop_assert_eq!(rung.kept, (trials / 4).max(1));
            let last = j + 1 == r.rungs.len();
            prop_assert_eq!(last, rung.kept == 1 || size >= pool);
            trials = rung.kept;
            size = (2 * size).min(pool);
        }
        prop_assert!(r.winner.is_some());
    }
}

fn eval_ctx(m: &attack_search::model::Classifier, eps: f64) -> AttackContext<'_> {
    AttackContext { model: m, surrogate: &m.graph, eps, budget: Budget::queries(400) }
}

fn prior_specs(n: usize, seed: u64) -> Vec<AttackSpec> {
    let space = AttackSpace::new(4, false);
    let mut rng = stream(seed, &[]);
    (0..n).map(|_| space.build(&mut PriorChooser { rng: &mut rng })).collect()
}

#[test]
fn score_without_tie_breaker_is_the_success_rate() {
    let m = base_model().clone();
    let data = correctly_classified(&m, &test_data(40), 0, 1).unwrap();
    let ctx = eval_ctx(&m, 0.1);
    for (j, spec) in prior_specs(6, 23).iter().enumerate() {
        let s = score(&ctx, spec, &data, j, 5, 0.0, 1).unwrap();
        if s == f64::NEG_INFINITY {
            continue;
        }
        let hits = data
            .iter()
            .filter(|(id, smp)| {
                let out = run_attack(&ctx, spec, &smp.x, smp.y, &mut attack_stream(5, *id, j)).unwrap();
                criterion(&m, &out.x_adv, &smp.x, smp.y, 0.1, &mut stream(0, &[purpose::DRAWS])).unwrap()
            })
            .count();
        assert_eq!(s, hits as f64 / data.len() as f64, "{spec:?}");
    }
}

#[test]
fn sha_winner_matches_a_full_dataset_oracle() {
    let m = base_model().clone();
    let data = correctly_classified(&m, &test_data(48), 0, 1).unwrap();
    let ctx = eval_ctx(&m, 0.08);
    let specs = prior_specs(8, 24);
    let n = data.len() / 2;
    let sc = |i: usize, size: usize| score(&ctx, &specs[i], &data[..size], 0, 9, 0.01, 1);
    let initial: Vec<f64> = (0..8).map(|i| sc(i, n).unwrap()).collect();
    let r = successive_halving(&initial, data.len(), n, |i, size| sc(i, size)).unwrap();
    let mut order: Vec<usize> = (0..8).collect();
    order.sort_by(|&a, &b| initial[b].total_cmp(&initial[a]).then(a.cmp(&b)));
    let quarter = &order[..2];
    let full: Vec<(usize, f64)> = quarter.iter().map(|&i| (i, sc(i, data.len()).unwrap())).collect();
    let best = full.iter().fold(full[0], |b, c| if c.1 > b.1 { *c } else { b });
    let expected = (best.1 > f64::NEG_INFINITY).then_some(best.0);
    assert_eq!(r.winner, expected);
}

#[test]
fn every_prior_spec_runs() {
    let m = noise_model();
    let ctx = AttackContext { model: &m, surrogate: &m.graph, eps: 0.1, budget: Budget::queries(150) };
    let space = AttackSpace { backbones: Backbone::ALL.to_vec(), num_classes: 4, randomized: true };
    let mut rng = stream(25, &[]);
    let s = &test_data(1).samples[0];
    for i in 0..300 {
        let spec = space.build(&mut PriorChooser { rng: &mut rng });
        assert!(spec.validate_ranges().is_empty(), "{spec:?}");
        run_attack(&ctx, &spec, &s.x, s.y, &mut stream(i, &[])).unwrap_or_else(|e| panic!("{spec:?}: {e}"));
    }
}

#[test]
fn rounds_only_see_unbroken_samples() {
    let m = reverse_sigmoid_model();
    let config = SearchConfig {
        m: 3,
        k: 6,
        n: 10,
        eps: 0.08,
        budget_seconds: None,
        budget_queries: Some(300),
        bpda_epochs: 2,
        ..SearchConfig::default()
    };
    let out = greedy_sequence_search(&m, &test_data(40), &config).unwrap();
    let r = &out.report;
    assert_eq!(r.rounds[0].remaining, r.clean_correct);
    for w in r.rounds.windows(2) {
        assert_eq!(w[1].remaining, w[0].remaining - w[0].broken);
    }
    assert_eq!(out.program.attacks.len(), r.rounds.iter().filter(|x| x.winner.is_some()).count());

    let one = greedy_sequence_search(&m, &test_data(40), &SearchConfig { m: 1, ..config.clone() }).unwrap();
    assert!(one.program.attacks.len() <= 1);
    assert_eq!(one.report.rounds[0].trials, r.rounds[0].trials);
}
