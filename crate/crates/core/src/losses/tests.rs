use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::model::ModelConfig;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::seed;
use crate::tensor::grad_check;

fn randn(seed_: u64, shape: &[usize]) -> Tensor {
    let mut rng = seed::rng(seed_, &[]);
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::from_vec(data, shape).unwrap()
}

fn unit_rows(seed_: u64, n: usize, d: usize) -> Tensor {
    let mut t = randn(seed_, &[n, d]);
    for row in t.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

fn random_mask(seed_: u64, pixels: usize, k: u8) -> Vec<u8> {
    let mut rng = seed::rng(seed_, &[7]);
    (0..pixels).map(|_| rng.random_range(0..k)).collect()
}

fn tensor_err(e: LossError) -> TensorError {
    match e {
        LossError::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

#[test]
fn dice_of_exact_one_hot_is_near_zero() {
    let mask = random_mask(1, 16, 3);
    let probs = one_hot(&[&mask], &[1, 3, 4, 4]).unwrap();
    let tape = Tape::new();
    let l = dice_loss(tape.constant(probs), &[&mask]).unwrap().item();
    assert!(l.abs() < 1e-5, "{l}");
}

#[test]
fn dice_of_uniform_probs_matches_direct_summation() {
    let mask = random_mask(2, 64, 2);
    let tape = Tape::new();
    let probs = tape.constant(Tensor::full(&[1, 2, 8, 8], 0.5));
    let l = dice_loss(probs, &[&mask]).unwrap().item();
    let mut want = 0.0;
    for k in 0..2u8 {
        let g: f64 = mask.iter().filter(|&&m| m == k).count() as f64;
        let inter = 0.5 * g;
        let psum = 0.5 * 64.0;
        want += (2.0 * inter + DICE_EPS) / (psum + g + DICE_EPS);
    }
    want = 1.0 - want / 2.0;
    assert!((l - want).abs() < 1e-12, "{l} vs {want}");
}

#[test]
fn unnormalized_probabilities_are_rejected() {
    let tape = Tape::new();
    let probs = tape.constant(Tensor::full(&[1, 2, 2, 2], 0.6));
    let mask = [0u8; 4];
    assert!(matches!(
        dice_loss(probs, &[&mask]),
        Err(LossError::NotNormalized { .. })
    ));
    assert!(matches!(bce_loss(probs, &[&mask]), Err(LossError::NotNormalized { .. })));
}

#[test]
fn cross_entropy_extremes() {
    let mask = random_mask(3, 16, 4);
    let tape = Tape::new();
    let perfect = bce_loss(tape.constant(one_hot(&[&mask], &[1, 4, 4, 4]).unwrap()), &[&mask])
        .unwrap()
        .item();
    assert!(perfect.abs() < 1e-6);
    let uniform = bce_loss(tape.constant(Tensor::full(&[1, 4, 4, 4], 0.25)), &[&mask])
        .unwrap()
        .item();
    assert!((uniform - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn segmentation_losses_match_finite_differences() {
    for case in 0..20 {
        let masks = [random_mask(case, 16, 4), random_mask(case + 100, 16, 4)];
        let m: Vec<&[u8]> = masks.iter().map(Vec::as_slice).collect();
        let x = randn(case, &[2, 4, 4, 4]);
        let dice = grad_check(
            |_, v| dice_loss(v.softmax(), &m).map_err(tensor_err),
            &x,
            1e-5,
        )
        .unwrap();
        let bce = grad_check(|_, v| bce_loss(v.softmax(), &m).map_err(tensor_err), &x, 1e-5).unwrap();
        let seg = grad_check(|_, v| seg_loss(v, &m).map_err(tensor_err), &x, 1e-5).unwrap();
        assert!(dice < 1e-4 && bce < 1e-4 && seg < 1e-4, "{dice} {bce} {seg}");
    }
}

#[test]
fn seg_loss_is_the_even_mix_of_its_parts() {
    let mask = random_mask(4, 64, 4);
    let tape = Tape::new();
    let logits = tape.constant(randn(4, &[1, 4, 8, 8]));
    let seg = seg_loss(logits, &[&mask]).unwrap().item();
    let d = dice_loss(logits.softmax(), &[&mask]).unwrap().item();
    let b = bce_loss(logits.softmax(), &[&mask]).unwrap().item();
    assert!((seg - (0.5 * d + 0.5 * b)).abs() < 1e-12);
}

#[test]
fn seg_loss_decreases_when_overfitting_one_sample() {
    let mask = random_mask(5, 64, 4);
    let mut params = vec![randn(5, &[1, 4, 8, 8])];
    let mut state = AdamState::new(&params);
    let cfg = AdamConfig {
        lr: 0.05,
        ..AdamConfig::default()
    };
    let mut losses = Vec::new();
    for _ in 0..50 {
        let tape = Tape::new();
        let v = tape.param(params[0].clone());
        let l = seg_loss(v, &[&mask]).unwrap();
        losses.push(l.item());
        let mut g = l.backward().unwrap();
        adam_step(&mut params, &[g.take(v)], &mut state, &cfg).unwrap();
    }
    assert!(losses[49] < 0.5 * losses[0], "{} -> {}", losses[0], losses[49]);
}

#[test]
fn dis_loss_reference_values() {
    let tape = Tape::new();
    let z = tape.constant(unit_rows(6, 1, 8));
    let e0 = tape.constant(Tensor::from_vec(vec![1.0, 0.0], &[1, 2]).unwrap());
    let e1 = tape.constant(Tensor::from_vec(vec![0.0, 1.0], &[1, 2]).unwrap());
    assert!((dis_loss(z, z, DisVariant::Signed).unwrap().item() - 1.0).abs() < 1e-12);
    assert!((dis_loss(z, z.neg(), DisVariant::Signed).unwrap().item() + 1.0).abs() < 1e-12);
    assert!((dis_loss(z, z.neg(), DisVariant::Squared).unwrap().item() - 1.0).abs() < 1e-12);
    assert_eq!(dis_loss(e0, e1, DisVariant::Signed).unwrap().item(), 0.0);
    let bad = tape.constant(Tensor::from_vec(vec![1.0, 1.0], &[1, 2]).unwrap());
    assert!(matches!(
        dis_loss(bad, e0, DisVariant::Signed),
        Err(LossError::NotUnit { what: "z_image", .. })
    ));
}

#[test]
fn total_loss_breakdown_and_style_gradient() {
    let mask = random_mask(7, 16, 3);
    let tape = Tape::new();
    let logits = tape.constant(randn(7, &[1, 3, 4, 4]));
    let zi = tape.param(unit_rows(8, 1, 6));
    let zs = tape.constant(unit_rows(9, 1, 6));
    let zero = total_loss(logits, &[&mask], zi, zs, 0.0, DisVariant::Signed).unwrap();
    assert_eq!(zero.report.l_total, zero.report.l_seg);
    assert_eq!(zero.total.item(), zero.report.l_seg);

    let t = total_loss(logits, &[&mask], zi, zs, 0.1, DisVariant::Signed).unwrap();
    let r = &t.report;
    assert!((r.l_total - (r.l_seg + 0.1 * r.l_dis)).abs() < 1e-12);
    assert!((t.total.item() - r.l_total).abs() < 1e-12);
    let g = t.total.backward().unwrap();
    let want = zs.to_tensor().map(|v| 0.1 * v);
    assert!(g.wrt(zi).unwrap().max_abs_diff(&want) < 1e-15);

    assert!(matches!(
        total_loss(logits, &[&mask], zi, zs, -0.1, DisVariant::Signed),
        Err(LossError::NegativeLambda(_))
    ));
}

#[test]
fn aux_terms_are_accounted_in_the_total() {
    let mask = random_mask(10, 16, 3);
    let tape = Tape::new();
    let logits = tape.constant(randn(10, &[1, 3, 4, 4]));
    let z = tape.constant(unit_rows(11, 1, 4));
    let mut t = total_loss(logits, &[&mask], z, z, 0.3, DisVariant::Signed).unwrap();
    t.add_aux("grl", tape.constant(Tensor::scalar(0.25))).unwrap();
    let r = &t.report;
    let sum = r.l_seg + r.lambda * r.l_dis + r.aux.values().sum::<f64>();
    assert!((r.l_total - sum).abs() < 1e-12);
    assert!((t.total.item() - sum).abs() < 1e-12);
}

fn grl_setup(seed_: u64) -> (GrlHead, Tensor) {
    let cfg = ModelConfig::micro();
    let head = GrlHead::new(&cfg, 3, &mut seed::rng(seed_, &[1]));
    (head, randn(seed_, &[4, 3, 2, 2]))
}

#[test]
fn grl_forward_is_plain_cross_entropy_and_reverses_gradients() {
    let (head, f) = grl_setup(12);
    let labels = [0, 1, 2, 1];
    let run = |lambda: f64, reverse: bool| {
        let tape = Tape::new();
        let fv = tape.param(f.clone());
        let w = head.params.bind(&tape, false);
        let loss = if reverse {
            grl_domain_loss(fv, &labels, &head, &w, lambda).unwrap()
        } else {
            // The same head without the reversal layer.
            let pooled = fv.mean(&[2, 3]).unwrap();
            let h = pooled.matmul(w[0]).unwrap().add(w[1]).unwrap().relu();
            let logits = h.matmul(w[2]).unwrap().add(w[3]).unwrap();
            cross_entropy(logits, &labels).unwrap()
        };
        let g = loss.backward().unwrap();
        (loss.item(), g.wrt(fv).unwrap().clone())
    };
    let (rev_v, rev_g) = run(1.0, true);
    let (plain_v, plain_g) = run(1.0, false);
    assert_eq!(rev_v, plain_v);
    assert!(rev_g.norm() > 0.0);
    for (a, b) in rev_g.data().iter().zip(plain_g.data()) {
        assert!((a + b).abs() < 1e-15);
    }
    let (_, zero_g) = run(0.0, true);
    assert!(zero_g.data().iter().all(|&v| v == 0.0));
}

#[test]
fn grl_rejects_single_domain_heads() {
    let head = GrlHead::new(&ModelConfig::micro(), 1, &mut seed::rng(13, &[1]));
    let tape = Tape::new();
    let w = head.params.bind(&tape, true);
    assert!(matches!(
        grl_domain_loss(tape.constant(randn(13, &[4, 3, 2, 2])), &[0, 0, 0, 0], &head, &w, 1.0),
        Err(LossError::SingleDomain)
    ));
}

#[test]
fn pseudo_domains_follow_style_bins() {
    let a = StyleDescriptor::identity();
    let b = StyleDescriptor {
        contrast: 1.5,
        ..StyleDescriptor::identity()
    };
    let c = StyleDescriptor {
        contrast: 1.01,
        ..StyleDescriptor::identity()
    };
    let bins = BinThresholds::default();
    let (labels, names) = pseudo_domains(&[&a, &b, &c], &bins).unwrap();
    assert_eq!(names.len(), 2);
    assert_eq!(labels[0], labels[2]);
    assert_ne!(labels[0], labels[1]);
    assert!(matches!(pseudo_domains(&[&a, &c], &bins), Err(LossError::SingleDomain)));
}

fn stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = t.shape();
    channel_moments(t.data(), s[2] * s[3])
}

#[test]
fn mixstyle_zero_lambda_is_identity() {
    let x = randn(14, &[3, 2, 4, 4]);
    let tape = Tape::new();
    let plan = MixPlan {
        lambdas: vec![0.0; 3],
        perm: vec![2, 0, 1],
    };
    let out = mixstyle_apply(tape.constant(x.clone()), &plan).unwrap().to_tensor();
    assert_eq!(out, x);
}

#[test]
fn mixstyle_full_lambda_takes_partner_statistics() {
    let x = randn(15, &[3, 2, 4, 4]);
    let tape = Tape::new();
    let plan = MixPlan {
        lambdas: vec![1.0; 3],
        perm: vec![1, 2, 0],
    };
    let out = mixstyle_apply(tape.constant(x.clone()), &plan).unwrap().to_tensor();
    let (mu, sig) = stats(&x);
    let (mu2, sig2) = stats(&out);
    for i in 0..3 {
        for c in 0..2 {
            let (a, b) = (i * 2 + c, plan.perm[i] * 2 + c);
            assert!((mu2[a] - mu[b]).abs() < 1e-9);
            assert!((sig2[a] - sig[b]).abs() < 1e-9);
        }
    }
}

#[test]
fn mixstyle_preserves_normalized_content() {
    let x = randn(16, &[4, 3, 4, 4]);
    let tape = Tape::new();
    let plan = MixPlan {
        lambdas: vec![0.3, 0.9, 0.5, 0.1],
        perm: vec![3, 2, 1, 0],
    };
    let out = mixstyle_apply(tape.constant(x.clone()), &plan).unwrap().to_tensor();
    let norm = |t: &Tensor| {
        let (mu, sig) = stats(t);
        t.data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mu[i / 16]) / sig[i / 16])
            .collect::<Vec<_>>()
    };
    for (a, b) in norm(&x).iter().zip(norm(&out)) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn mixstyle_guards_and_coin() {
    let mut rng = seed::rng(17, &[]);
    assert!(matches!(mixstyle_plan(1, 0.1, &mut rng), Err(LossError::BatchTooSmall(1))));
    assert!(matches!(mixstyle_plan(4, 0.0, &mut rng), Err(LossError::Alpha(_))));
    let applied = (0..1000)
        .filter(|_| mixstyle_plan(4, 0.1, &mut rng).unwrap().is_some())
        .count();
    assert!((400..=600).contains(&applied), "{applied}");
    let plan = mixstyle_plan(8, 0.1, &mut seed::rng(18, &[])).unwrap();
    if let Some(p) = plan {
        assert!(p.lambdas.iter().all(|l| (0.0..=1.0).contains(l)));
        let mut sorted = p.perm.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..8).collect::<Vec<_>>());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dis_loss_stays_in_unit_interval(a in any::<u64>(), b in any::<u64>()) {
        let tape = Tape::new();
        let za = tape.constant(unit_rows(a, 3, 5));
        let zb = tape.constant(unit_rows(b, 3, 5));
        let v = dis_loss(za, zb, DisVariant::Signed).unwrap().item();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v));
    }

    #[test]
    fn total_loss_is_linear_in_lambda(s in any::<u64>(), l1 in 0.0f64..2.0, l2 in 0.0f64..2.0) {
        let mask = random_mask(s, 16, 3);
        let tape = Tape::new();
        let logits = tape.constant(randn(s, &[1, 3, 4, 4]));
        let zi = tape.constant(unit_rows(s ^ 1, 1, 4));
        let zs = tape.constant(unit_rows(s ^ 2, 1, 4));
        let a = total_loss(logits, &[&mask], zi, zs, l1, DisVariant::Signed).unwrap();
        let b = total_loss(logits, &[&mask], zi, zs, l2, DisVariant::Signed).unwrap();
        let diff = a.report.l_total - b.report.l_total;
        prop_assert!((diff - (l1 - l2) * a.report.l_dis).abs() < 1e-12);
    }

    #[test]
    fn seg_loss_is_non_negative(s in any::<u64>()) {
        let mask = random_mask(s, 16, 4);
        let tape = Tape::new();
        let l = seg_loss(tape.constant(randn(s, &[1, 4, 4, 4]).map(|v| 5.0 * v)), &[&mask]).unwrap().item();
        prop_assert!(l >= 0.0);
    }
}
