mod common;

use attack_search::attack::{
    criterion, run_attack, run_sequence, AttackContext, AttackSpec, Backbone, Budget, Oracle, EPS_TOLERANCE,
};
use attack_search::graph::{Dense, GraphBuilder, Op, Tap};
use attack_search::loss::{LossKind, LossRefs, LossSpec};
use attack_search::model::{make_fixture_dataset, train_fixture, Arch, Classifier, FixtureKind, TrainConfig};
use attack_search::rng::stream;
use attack_search::search::{AttackSpace, Space};
use attack_search::search::space::PriorChooser;
use attack_search::Tensor;
use common::*;
use proptest::prelude::*;

const EPS: f64 = 0.15;

fn ctx<'a>(m: &'a Classifier, budget: Budget) -> AttackContext<'a> {
    AttackContext { model: m, surrogate: &m.graph, eps: EPS, budget }
}

fn ce() -> LossSpec {
    LossSpec::untargeted(LossKind::CE, Tap::Probs)
}

fn same_outcome(a: &attack_search::attack::AttackOutcome, b: &attack_search::attack::AttackOutcome) -> bool {
    a.x_adv == b.x_adv && a.success == b.success && a.queries == b.queries && a.objective.to_bits() == b.objective.to_bits()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn outputs_respect_the_ball_and_the_domain(seed in 0u64..100_000, sample in 0usize..20) {
        let m = noise_model();
        let space = AttackSpace { backbones: Backbone::ALL.to_vec(), num_classes: 4, randomized: true };
        let mut rng = stream(seed, &[]);
        let spec = space.build(&mut PriorChooser { rng: &mut rng });
        let s = &test_data(20).samples[sample];
        let out = run_attack(&ctx(&m, Budget::queries(300)), &spec, &s.x, s.y, &mut stream(seed, &[1])).unwrap();
        prop_assert!(out.x_adv.linf_distance(&s.x) <= EPS + EPS_TOLERANCE);
        prop_assert!(out.x_adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn every_backbone_replays_bit_identically() {
    let m = noise_model();
    let s = &test_data(3).samples[2];
    for b in Backbone::ALL {
        let loss = match b {
            Backbone::DeepFool => LossSpec::difference(LossKind::L1, 1, Tap::Logits),
            Backbone::CW => LossSpec::untargeted(LossKind::Hinge, Tap::Logits),
            Backbone::FAB => LossSpec::untargeted(LossKind::L1, Tap::Logits),
            _ => ce(),
        };
        let mut spec = AttackSpec::new(b, loss);
        spec.randomize = b.generic().randomize;
        let c = ctx(&m, Budget::queries(400));
        let a = run_attack(&c, &spec, &s.x, s.y, &mut stream(3, &[])).unwrap();
        let r = run_attack(&c, &spec, &s.x, s.y, &mut stream(3, &[])).unwrap();
        assert!(same_outcome(&a, &r), "{b}");
    }
}

#[test]
fn success_is_judged_on_the_original_model() {
    let m = quantize_model();
    let train = make_fixture_dataset(FixtureKind::Bars, 40, 0).unwrap();
    let broken = train_fixture(&train, Arch::Mlp, &TrainConfig { epochs: 0, seed: 77, ..Default::default() }).unwrap().graph;
    let data = test_data(30);
    let spec = AttackSpec::new(Backbone::PGD, ce()).with_param("step", 20.0);
    for (i, s) in data.samples.iter().enumerate() {
        let c = AttackContext { model: &m, surrogate: &broken, eps: EPS, budget: Budget::queries(200) };
        let out = run_attack(&c, &spec, &s.x, s.y, &mut stream(i as u64, &[])).unwrap();
        let again = criterion(&m, &out.x_adv, &s.x, s.y, EPS, &mut stream(0, &[])).unwrap();
        let pred_ok = m.predict(&s.x, &mut stream(0, &[])).unwrap() == s.y;
        if pred_ok {
            assert_eq!(out.success, again);
        }
    }
}

#[test]
fn fgsm_on_a_linear_model_steps_against_the_label_row() {
    let w = vec![1.0, -2.0, -1.0, 2.0];
    let (mut b, x) = GraphBuilder::new(&[2]);
    let z = b.add(Op::Dense(Dense { inputs: 2, outputs: 2, weight: w, bias: vec![0.0; 2] }), &[x]).unwrap();
    let p = b.add(Op::Softmax, &[z]).unwrap();
    let m = Classifier::new(b.build(z, p).unwrap(), None);
    let x0 = Tensor::vector(vec![0.5, 0.3]);
    let spec = AttackSpec::new(Backbone::FGSM, LossSpec::untargeted(LossKind::L1, Tap::Logits));
    let c = AttackContext { model: &m, surrogate: &m.graph, eps: 0.1, budget: Budget::unlimited() };
    let out = run_attack(&c, &spec, &x0, 0, &mut stream(0, &[])).unwrap();
    // The L1 objective gradient is -row_0 = [-1, 2].
    let expected = [0.5 - 0.1, 0.3 + 0.1];
    for (a, e) in out.x_adv.data().iter().zip(expected) {
        assert!((a - e).abs() < 1e-15);
    }
}

#[test]
fn single_full_step_pgd_equals_fgsm() {
    let m = base_model().clone();
    let data = test_data(10);
    let fgsm = AttackSpec::new(Backbone::FGSM, ce());
    let mut pgd = AttackSpec::new(Backbone::PGD, ce()).with_param("rel_stepsize", 1.0);
    pgd.params.insert("step".into(), 1.0);
    for (i, s) in data.samples.iter().enumerate() {
        let c = ctx(&m, Budget::unlimited());
        let a = run_attack(&c, &fgsm, &s.x, s.y, &mut stream(i as u64, &[])).unwrap();
        let b = run_attack(&c, &pgd, &s.x, s.y, &mut stream(i as u64, &[])).unwrap();
        assert_eq!(a.x_adv, b.x_adv);
    }
}

#[test]
fn repeat_without_randomness_is_a_single_run() {
    let m = base_model().clone();
    let s = &test_data(4).samples[3];
    let one = AttackSpec::new(Backbone::APGD, ce()).with_param("n_iter", 20.0);
    let mut three = one.clone();
    three.repeat = 3;
    let c = ctx(&m, Budget::unlimited());
    let a = run_attack(&c, &one, &s.x, s.y, &mut stream(1, &[])).unwrap();
    let b = run_attack(&c, &three, &s.x, s.y, &mut stream(1, &[])).unwrap();
    assert!(same_outcome(&a, &b));
}

#[test]
fn eot_averaging_reduces_gradient_variance() {
    let m = noise_model();
    let x = &test_data(1).samples[0];
    let variance = |eot: u32| {
        let grads: Vec<Tensor> = (0..50)
            .map(|i| {
                let mut o = Oracle::new(&m.graph, Budget::unlimited(), i);
                o.objective_grad(&x.x, x.y, None, &ce(), &LossRefs::default(), eot).unwrap().1
            })
            .collect();
        let n = grads.len() as f64;
        let d = grads[0].len();
        (0..d)
            .map(|j| {
                let mean = grads.iter().map(|g| g.data()[j]).sum::<f64>() / n;
                grads.iter().map(|g| (g.data()[j] - mean).powi(2)).sum::<f64>() / (n - 1.0)
            })
            .sum::<f64>()
    };
    let (v1, v16) = (variance(1), variance(16));
    assert!(v16 < v1, "{v16} vs {v1}");
}

#[test]
fn sqr_breaks_quantization_where_native_pgd_cannot() {
    let m = quantize_model();
    let data = test_data(40);
    let pgd = AttackSpec::new(Backbone::PGD, ce());
    let sqr = AttackSpec::new(Backbone::SQR, LossSpec::untargeted(LossKind::Hinge, Tap::Logits));
    let (mut p, mut q) = (0, 0);
    for (i, s) in data.samples.iter().enumerate() {
        let c = ctx(&m, Budget::queries(2000));
        p += usize::from(run_attack(&c, &pgd, &s.x, s.y, &mut stream(i as u64, &[])).unwrap().success);
        q += usize::from(run_attack(&c, &sqr, &s.x, s.y, &mut stream(i as u64, &[])).unwrap().success);
    }
    println!("pgd {p}, sqr {q} of {}", data.len());
    assert_eq!(p, 0);
    assert!(q > 0);
}

#[test]
fn sequences_return_the_first_success_and_stop() {
    let m = base_model().clone();
    let c = ctx(&m, Budget::unlimited());
    let noop = AttackSpec::new(Backbone::PGD, ce()).with_param("rel_stepsize", 0.001).with_param("step", 20.0);
    let strong = AttackSpec::new(Backbone::FGSM, ce());
    let data = test_data(40);
    let s = data
        .samples
        .iter()
        .enumerate()
        .find(|(i, s)| {
            let a = run_sequence(&c, std::slice::from_ref(&noop), &s.x, s.y, 0, *i as u64).unwrap();
            let b = run_sequence(&c, &[noop.clone(), strong.clone()], &s.x, s.y, 0, *i as u64).unwrap();
            !a.outcome.success && b.outcome.success
        })
        .map(|(i, s)| (i as u64, s))
        .expect("a sample only the strong attack breaks");
    let out = run_sequence(&c, &[noop.clone(), strong.clone()], &s.1.x, s.1.y, 0, s.0).unwrap();
    assert_eq!(out.winner, Some(1));
    assert_eq!(out.executed, 2);
    let alone = run_sequence(&c, std::slice::from_ref(&strong), &s.1.x, s.1.y, 0, s.0).unwrap();
    let first = run_sequence(&c, &[strong.clone(), noop.clone()], &s.1.x, s.1.y, 0, s.0).unwrap();
    assert_eq!(first.winner, Some(0));
    assert_eq!(first.executed, 1);
    assert_eq!(first.outcome.queries, alone.outcome.queries);
}
