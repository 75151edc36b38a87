mod common;

use attack_search::attack::{run_sequence, AttackContext, Budget};
use attack_search::dsl::{parse, AttackProgram};
use attack_search::metrics::{evaluate, robust_accuracy_attacked, Aggregates, EvalOptions, EvalReport};
use attack_search::model::{Classifier, Dataset};
use attack_search::rng::stream;
use common::*;

fn options(eps: f64, draws: usize) -> EvalOptions {
    EvalOptions { eps, seed: 0, draws, budget: Budget::queries(400), jobs: 1 }
}

fn program() -> AttackProgram {
    parse(
        "FGSM with {} with untargeted CE with probs; \
         PGD with {step: 20} with targeted Hinge, 2 with logits; \
         SQR with {n_queries: 1000} with untargeted L1 with logits",
    )
    .unwrap()
}

fn run(m: &Classifier, p: &AttackProgram, data: &Dataset, eps: f64, draws: usize) -> EvalReport {
    evaluate(m, &m.graph, p, data, &options(eps, draws)).unwrap().0
}

#[test]
fn without_a_detector_rerr_is_the_plain_robust_error() {
    let m = base_model().clone();
    let data = test_data(60);
    let p = program();
    let r = run(&m, &p, &data, 0.15, 1);
    println!("rerr {}", r.aggregates.rerr);
    let ctx = AttackContext { model: &m, surrogate: &m.graph, eps: 0.15, budget: Budget::queries(400) };
    let mut wrong = 0;
    for (i, s) in data.samples.iter().enumerate() {
        let clean_wrong = m.predict(&s.x, &mut stream(0, &[])).unwrap() != s.y;
        let broken = !clean_wrong && run_sequence(&ctx, &p.attacks, &s.x, s.y, 0, i as u64).unwrap().outcome.success;
        wrong += usize::from(clean_wrong || broken);
    }
    assert_eq!(r.aggregates.rerr, wrong as f64 / data.len() as f64);
}

#[test]
fn aggregates_are_recomputable_from_rows() {
    let m = combined_model(0.3);
    let r = run(&m, &program(), &test_data(40), 0.15, 1);
    assert_eq!(r.aggregates, Aggregates::from_records(&r.records));
    assert!((0.0..=1.0).contains(&r.aggregates.rerr));
    for rec in &r.records {
        assert!((0.0..=1.0).contains(&rec.success));
        assert!(rec.rerr_num <= rec.rerr_den);
    }
}

#[test]
fn rerr_is_monotone_in_the_program() {
    let data = test_data(40);
    for m in [combined_model(0.3), base_model().clone(), noise_model()] {
        let p = program();
        let mut last = -1.0;
        for j in 0..=p.attacks.len() {
            let prefix = AttackProgram { attacks: p.attacks[..j].to_vec() };
            let r = run(&m, &prefix, &data, 0.12, 10).aggregates.rerr;
            assert!(r >= last, "prefix {j}: {r} < {last}");
            last = r;
        }
    }
}

#[test]
fn vanishing_threshold_matches_no_detector() {
    let data = test_data(40);
    let with = run(&defended(&[], Some(1e-9)), &program(), &data, 0.1, 1);
    let without = run(base_model(), &program(), &data, 0.1, 1);
    assert_eq!(with.aggregates.rerr, without.aggregates.rerr);
}

#[test]
fn deterministic_models_ignore_extra_draws() {
    let data = test_data(30);
    let a = run(base_model(), &program(), &data, 0.1, 1);
    let b = run(base_model(), &program(), &data, 0.1, 10);
    assert_eq!(a.records, b.records);
    assert_eq!(a.aggregates, b.aggregates);
    assert_eq!(a.draws, 1);
    assert_eq!(b.draws, 1);
}

#[test]
fn empty_program_reports_clean_error() {
    let data = test_data(50);
    let r = run(base_model(), &AttackProgram { attacks: vec![] }, &data, 0.1, 1);
    assert_eq!(r.aggregates.asr, Some(0.0));
    assert_eq!(r.aggregates.rerr, 1.0 - r.aggregates.clean_accuracy);
}

#[test]
fn asr_and_attacked_robust_accuracy_sum_to_one() {
    let data = test_data(60);
    let r = run(base_model(), &program(), &data, 0.15, 1);
    let asr = r.aggregates.asr.unwrap();
    println!("asr {asr}");
    assert!(asr > 0.0 && asr < 1.0, "{asr}");
    assert_eq!(asr + robust_accuracy_attacked(&r.records).unwrap(), 1.0);
}

#[test]
fn noisy_rerr_is_stable_across_seeds() {
    let (spread, values) = noise_spread();
    println!("Rerr by seed {values:?}");
    assert!(spread <= 0.05, "{spread}");
}
