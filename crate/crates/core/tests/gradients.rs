mod common;

use attack_search::graph::{
    apply_transform, list_bpda_candidates, list_removal_candidates, Approximator, Dense, GraphBuilder, Op, Tap,
    TransformPolicy,
};
use attack_search::loss::{eval_loss, loss_gradient, objective_sign, Direction, LossKind, LossRefs, LossSpec};
use attack_search::model::Defense;
use attack_search::rng::stream;
use attack_search::Tensor;
use common::*;
use proptest::prelude::*;

#[test]
fn every_loss_matches_finite_differences_on_random_graphs() {
    for seed in 0..10 {
        let (worst, skipped, total) = fd_sweep(seed, 2);
        println!("graph {seed}: max rel err {worst:.3e}, {skipped}/{total} coordinates at kinks");
        assert!(worst <= 1e-4, "graph {seed}: {worst}");
        assert!(skipped * 10 < total);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_specs_match_finite_differences(seed in 0u64..10_000, spec_i in 0usize..25, y in 0usize..4, dt in 1usize..4) {
        let g = random_graph(seed);
        let spec = all_specs()[spec_i % all_specs().len()];
        let mut rng = stream(seed, &[1]);
        let x = random_input(&mut rng, g.input_shape());
        let refs = LossRefs { clean: Some(random_input(&mut rng, &[4])), target: Some(random_input(&mut rng, &[4])) };
        let t = (spec.direction != Direction::U).then_some((y + dt) % 4);
        let (_, grad, _) = loss_gradient(&g, &x, y, t, &spec, &refs, &mut stream(0, &[])).unwrap();
        let (e, _) = max_relative_error(&grad, &finite_diff_grad(&g, &x, y, t, &spec, &refs, 1e-3));
        prop_assert!(e <= 1e-4, "{spec}: {e}");
    }

    #[test]
    fn empty_policy_preserves_outputs_bit_exactly(seed in 0u64..10_000) {
        let g = random_graph(seed);
        let t = apply_transform(&g, &TransformPolicy::default()).unwrap();
        let x = random_input(&mut stream(seed, &[2]), g.input_shape());
        let a = g.forward(&x, &mut stream(0, &[])).unwrap();
        let b = t.forward(&x, &mut stream(0, &[])).unwrap();
        prop_assert_eq!(a.logits, b.logits);
        prop_assert_eq!(a.probs, b.probs);
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..10_000) {
        let g = noise_model().graph;
        let x = random_input(&mut stream(seed, &[3]), g.input_shape());
        let a = g.forward(&x, &mut stream(seed, &[])).unwrap();
        let b = g.forward(&x, &mut stream(seed, &[])).unwrap();
        prop_assert_eq!(a.probs, b.probs);
    }

    #[test]
    fn hinge_and_l1_ignore_permutations_of_other_classes(z in prop::collection::vec(-5.0f64..5.0, 6), y in 0usize..6, t in 0usize..6, rot in 1usize..4) {
        prop_assume!(t != y);
        let zt = Tensor::vector(z.clone());
        let mut order: Vec<usize> = (0..6).collect();
        order.sort_by(|&a, &b| z[b].total_cmp(&z[a]));
        let fixed = [y, t, order[0], order[2]];
        let free: Vec<usize> = (0..6).filter(|i| !fixed.contains(i)).collect();
        let mut p = z.clone();
        for (k, &i) in free.iter().enumerate() {
            p[i] = z[free[(k + rot) % free.len()]];
        }
        let pt = Tensor::vector(p);
        for kind in [LossKind::Hinge, LossKind::L1] {
            for spec in [LossSpec::untargeted(kind, Tap::Logits), LossSpec::targeted(kind, 1, Tap::Logits), LossSpec::difference(kind, 1, Tap::Logits)] {
                let r = LossRefs::default();
                prop_assert_eq!(eval_loss(&zt, y, Some(t), &spec, &r).unwrap(), eval_loss(&pt, y, Some(t), &spec, &r).unwrap());
            }
        }
    }

    #[test]
    fn dlr_is_affine_invariant(z in prop::collection::vec(-5.0f64..5.0, 5), y in 0usize..5, a in 0.1f64..10.0, b in -10.0f64..10.0) {
        let s = LossSpec::untargeted(LossKind::DLR, Tap::Logits);
        let r = LossRefs::default();
        let v = eval_loss(&Tensor::vector(z.clone()), y, None, &s, &r).unwrap();
        let w = eval_loss(&Tensor::vector(z.iter().map(|v| a * v + b).collect()), y, None, &s, &r).unwrap();
        prop_assert!((v - w).abs() <= 1e-9, "{v} {w}");
    }

    #[test]
    fn difference_is_targeted_minus_untargeted(z in prop::collection::vec(0.01f64..1.0, 4), y in 0usize..4, dt in 1usize..4, kind_i in 0usize..5) {
        let kind = LossKind::ALL[kind_i];
        let tap = if kind == LossKind::CE { Tap::Probs } else { Tap::Logits };
        let zt = Tensor::vector(z);
        let t = (y + dt) % 4;
        let r = LossRefs { clean: Some(Tensor::vector(vec![0.1, 0.2, 0.3, 0.4])), target: Some(Tensor::vector(vec![0.4, 0.3, 0.2, 0.1])) };
        let d = eval_loss(&zt, y, Some(t), &LossSpec::difference(kind, 1, tap), &r).unwrap();
        let tv = eval_loss(&zt, y, Some(t), &LossSpec::targeted(kind, 1, tap), &r).unwrap();
        let u = eval_loss(&zt, y, None, &LossSpec::untargeted(kind, tap), &r).unwrap();
        prop_assert_eq!(d, tv - u);
    }
}

/// Straight nested-loop evaluation of a dense/relu/softmax network.
fn reference_forward(g: &attack_search::graph::Graph, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut cur = x.to_vec();
    let mut logits = Vec::new();
    for v in g.vertices() {
        match &v.op {
            Op::Input | Op::Flatten => {}
            Op::Dense(d) => {
                let mut out = vec![0.0; d.outputs];
                for o in 0..d.outputs {
                    let mut acc = d.bias[o];
                    for i in 0..d.inputs {
                        acc += d.weight[o * d.inputs + i] * cur[i];
                    }
                    out[o] = acc;
                }
                cur = out;
            }
            Op::Relu => {
                for c in cur.iter_mut() {
                    if *c < 0.0 {
                        *c = 0.0;
                    }
                }
            }
            Op::Softmax => {
                logits = cur.clone();
                let mut m = f64::NEG_INFINITY;
                for &c in &cur {
                    if c > m {
                        m = c;
                    }
                }
                let mut total = 0.0;
                for c in cur.iter_mut() {
                    *c = (*c - m).exp();
                    total += *c;
                }
                for c in cur.iter_mut() {
                    *c /= total;
                }
            }
            other => panic!("reference evaluator does not support {}", other.name()),
        }
    }
    (logits, cur)
}

#[test]
fn fixture_net_matches_scalar_reference() {
    let m = base_model();
    let data = test_data(16);
    for s in &data.samples {
        let pass = m.forward(&s.x, &mut stream(0, &[])).unwrap();
        let (logits, probs) = reference_forward(&m.graph, s.x.data());
        for (a, b) in pass.logits.data().iter().zip(&logits) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} {b}");
        }
        for (a, b) in pass.probs.data().iter().zip(&probs) {
            assert!((a - b).abs() <= 1e-12, "{a} {b}");
        }
    }
}

#[test]
fn l1_objective_gradient_is_minus_the_label_row() {
    let w = vec![2.0, -1.0, 0.5, 3.0];
    let (mut b, x) = GraphBuilder::new(&[2]);
    let z = b.add(Op::Dense(Dense { inputs: 2, outputs: 2, weight: w.clone(), bias: vec![0.0; 2] }), &[x]).unwrap();
    let p = b.add(Op::Softmax, &[z]).unwrap();
    let g = b.build(z, p).unwrap();
    let spec = LossSpec::untargeted(LossKind::L1, Tap::Logits);
    assert_eq!(objective_sign(&spec), 1.0);
    for y in 0..2 {
        let (_, grad, _) = loss_gradient(&g, &Tensor::vector(vec![0.3, 0.7]), y, None, &spec, &LossRefs::default(), &mut stream(0, &[])).unwrap();
        let row: Vec<f64> = w[2 * y..2 * y + 2].iter().map(|v| -v).collect();
        assert_eq!(grad.data(), row.as_slice());
    }
}

#[test]
fn quantize_native_gradient_is_zero_and_bpda_restores_it() {
    let q = quantize_model();
    let spec = LossSpec::untargeted(LossKind::CE, Tap::Probs);
    let cands = list_bpda_candidates(&q.graph);
    assert_eq!(cands.len(), 1);
    let mut policy = TransformPolicy::default();
    policy.bpda.insert(cands[0], Approximator::Identity);
    let surrogate = apply_transform(&q.graph, &policy).unwrap();
    let mut rng = stream(4, &[]);
    for _ in 0..50 {
        let x = random_input(&mut rng, q.input_shape());
        let (_, native, _) = loss_gradient(&q.graph, &x, 0, None, &spec, &LossRefs::default(), &mut stream(0, &[])).unwrap();
        assert!(native.data().iter().all(|&v| v == 0.0));
        let (_, bpda, _) = loss_gradient(&surrogate, &x, 0, None, &spec, &LossRefs::default(), &mut stream(0, &[])).unwrap();
        assert!(bpda.data().iter().any(|&v| v != 0.0));
        let a = q.forward(&x, &mut stream(0, &[])).unwrap();
        let b = surrogate.forward(&x, &mut stream(0, &[])).unwrap();
        assert_eq!(a.probs, b.probs);
    }
}

#[test]
fn every_removal_subset_keeps_shapes_valid() {
    let m = defended(
        &[Defense::Quantize { levels: 4 }, Defense::GaussianNoise { sigma: 0.05 }, Defense::ReverseSigmoid { beta: 0.7, gamma: 0.3 }],
        None,
    );
    let cands = list_removal_candidates(&m.graph);
    assert_eq!(cands.len(), 3);
    let x = random_input(&mut stream(5, &[]), m.input_shape());
    for mask in 0..(1u32 << cands.len()) {
        let mut policy = TransformPolicy::default();
        for (i, v) in cands.iter().enumerate() {
            policy.removal.insert(*v, mask & (1 << i) != 0);
        }
        let t = apply_transform(&m.graph, &policy).unwrap();
        let pass = t.forward(&x, &mut stream(0, &[])).unwrap();
        assert_eq!(pass.probs.len(), 4);
    }
    let mut all = TransformPolicy::default();
    for v in &cands {
        all.removal.insert(*v, true);
    }
    let bare = apply_transform(&m.graph, &all).unwrap();
    assert_eq!(
        bare.forward(&x, &mut stream(0, &[])).unwrap().logits,
        base_model().forward(&x, &mut stream(0, &[])).unwrap().logits
    );
}
