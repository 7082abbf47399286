mod common;

use common::*;
use dgmnet::losses::*;
use ndarray::{Array2, Array3, Array4};
use proptest::prelude::*;

fn run_total(inst: &LossInstance) -> (LossBreakdown, LossGradients) {
    let cfg = LossConfig { lambda: inst.lambda, dice_epsilon: inst.eps };
    total_loss(
        inst.pred.view(),
        inst.target.view(),
        Some(LandmarkTerms { pred: inst.lm_pred.view(), truth: inst.lm_truth.view() }),
        &cfg,
    )
    .unwrap()
}

#[test]
fn total_matches_reference_on_random_instances() {
    for seed in 0..50 {
        let inst = loss_instance(seed, 1 + seed as usize % 3, 1 + seed as usize % 4, 4 + seed as usize % 5, 3 + seed as usize % 6);
        let (b, _) = run_total(&inst);
        let want = oracle_total(&inst);
        assert!((b.total - want).abs() < 1e-9, "seed {seed}: {} vs {want}", b.total);
        assert!((b.dice - oracle_dice(&inst.pred, &inst.target, inst.eps)).abs() < 1e-12);
        assert!((b.lnd - oracle_lnd(&inst.lm_pred, &inst.lm_truth)).abs() < 1e-12);
    }
}

#[test]
fn total_gradient_matches_finite_differences() {
    let inst = loss_instance(7, 2, 3, 8, 8);
    let (_, g) = run_total(&inst);
    let mask_len = inst.pred.len();
    let mut x: Vec<f64> = inst.pred.iter().copied().collect();
    x.extend(inst.lm_pred.iter());
    let f = |v: &[f64]| {
        let mut i2 = inst.clone();
        i2.pred = Array4::from_shape_vec(inst.pred.raw_dim(), v[..mask_len].to_vec()).unwrap();
        i2.lm_pred = Array2::from_shape_vec(inst.lm_pred.raw_dim(), v[mask_len..].to_vec()).unwrap();
        run_total(&i2).0.total
    };
    let num = numeric_grad(&x, 1e-6, f);
    let mut an: Vec<f64> = g.mask.iter().copied().collect();
    an.extend(g.landmarks.unwrap().iter());
    assert!(relative_error(&an, &num) < 1e-4);
}

#[test]
fn cls_gradient_matches_finite_differences() {
    let inst = loss_instance(3, 4, 5, 2, 2);
    let z = Array2::from_shape_fn((4, 5), |(i, u)| inst.lm_truth[[i, u * 9]]);
    let p = Array2::from_shape_fn((4, 5), |(i, u)| inst.lm_pred[[i, u * 9]]);
    let (_, g) = cls_loss(p.view(), z.view()).unwrap();
    let x: Vec<f64> = p.iter().copied().collect();
    let num = numeric_grad(&x, 1e-6, |v| cls_loss(Array2::from_shape_vec((4, 5), v.to_vec()).unwrap().view(), z.view()).unwrap().0);
    assert!(relative_error(&g.iter().copied().collect::<Vec<_>>(), &num) < 1e-4);
}

#[test]
fn landmark_gradient_matches_finite_differences() {
    let inst = loss_instance(5, 3, 4, 2, 2);
    let (z, t_true) = split_landmarks(inst.lm_truth.view()).unwrap();
    let (_, t_pred) = split_landmarks(inst.lm_pred.view()).unwrap();
    let (_, g) = landmark_loss(t_true.view(), t_pred.view(), z.view()).unwrap();
    let dim = t_pred.raw_dim();
    let x: Vec<f64> = t_pred.iter().copied().collect();
    let num = numeric_grad(&x, 1e-6, |v| {
        landmark_loss(t_true.view(), Array3::from_shape_vec(dim.clone(), v.to_vec()).unwrap().view(), z.view())
            .unwrap()
            .0
    });
    assert!(relative_error(&g.iter().copied().collect::<Vec<_>>(), &num) < 1e-4);
}

#[test]
fn dice_gradient_matches_finite_differences() {
    let inst = loss_instance(11, 2, 1, 8, 8);
    let (_, g) = dice_loss(inst.pred.view(), inst.target.view(), 1e-6).unwrap();
    let x: Vec<f64> = inst.pred.iter().copied().collect();
    let dim = inst.pred.raw_dim();
    let num = numeric_grad(&x, 1e-6, |v| {
        dice_loss(Array4::from_shape_vec(dim, v.to_vec()).unwrap().view(), inst.target.view(), 1e-6).unwrap().0
    });
    assert!(relative_error(&g.iter().copied().collect::<Vec<_>>(), &num) < 1e-4);
}

#[test]
fn absent_slices_ignore_coordinates() {
    let mut inst = loss_instance(2, 1, 2, 3, 3);
    for k in 0..9 {
        inst.lm_truth[[0, k]] = 0.0;
    }
    let (a, _) = run_total(&inst);
    for k in 1..9 {
        inst.lm_pred[[0, k]] += 17.0;
    }
    let (b, _) = run_total(&inst);
    assert_eq!(a.lnd, b.lnd);
}

proptest! {
    #[test]
    fn losses_are_non_negative(seed in 0u64..10_000, n in 1usize..4, s in 1usize..5, h in 1usize..7, w in 1usize..7) {
        let inst = loss_instance(seed, n, s, h, w);
        let (b, _) = run_total(&inst);
        prop_assert!(b.total >= 0.0 && b.dice >= 0.0 && b.ce >= 0.0 && b.cls >= 0.0 && b.lnd >= 0.0);
        prop_assert!(b.dice <= 1.0);
        prop_assert!(b.is_finite());
    }

    #[test]
    fn lambda_zero_reduces_to_mask_loss(seed in 0u64..10_000) {
        let mut inst = loss_instance(seed, 2, 3, 4, 4);
        inst.lambda = 0.0;
        let (b, g) = run_total(&inst);
        prop_assert_eq!(b.total, b.mask);
        prop_assert!(g.landmarks.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn smooth_l1_is_even_and_continuous(d in -5.0f64..5.0) {
        prop_assert_eq!(smooth_l1(d), smooth_l1(-d));
        prop_assert!(smooth_l1(d) <= 0.5 * d * d + 1e-15);
        prop_assert!(smooth_l1(d) >= 0.0);
        prop_assert!(smooth_l1_grad(d).abs() <= 1.0);
    }

    #[test]
    fn perfect_mask_prediction_minimizes_dice(seed in 0u64..10_000) {
        let inst = loss_instance(seed, 2, 1, 5, 5);
        let perfect = dice_loss(inst.target.view(), inst.target.view(), 1e-6).unwrap().0;
        let other = dice_loss(inst.pred.view(), inst.target.view(), 1e-6).unwrap().0;
        prop_assert!(perfect <= other + 1e-12);
    }
}
