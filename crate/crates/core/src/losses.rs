//! Multi-task objective.
//!
//! `total = mask + λ · (cls + lnd)` where `mask = dice + ce` on the
//! predicted label map, `cls` is the binary cross-entropy of per-slice
//! presence and `lnd` the smooth-L1 distance between predicted and true
//! boundary coordinates on slices where the organ is present.
//!
//! Every function returns the loss value together with its gradient with
//! respect to the predictions, in `f64`.

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::landmarks::SLICE_STRIDE;

/// Probabilities are clipped to `[PROB_CLIP, 1 - PROB_CLIP]` before logs.
pub const PROB_CLIP: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("presence labels must be 0 or 1, got {0}")]
    BadLabel(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub dice_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            dice_epsilon: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mask: f64,
    pub dice: f64,
    pub ce: f64,
    pub cls: f64,
    pub lnd: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.total, self.mask, self.dice, self.ce, self.cls, self.lnd]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Running mean helper: `self += (other - self) / n`.
    pub fn accumulate_mean(&mut self, other: &LossBreakdown, n: usize) {
        let k = 1.0 / n as f64;
        self.total += (other.total - self.total) * k;
        self.mask += (other.mask - self.mask) * k;
        self.dice += (other.dice - self.dice) * k;
        self.ce += (other.ce - self.ce) * k;
        self.cls += (other.cls - self.cls) * k;
        self.lnd += (other.lnd - self.lnd) * k;
    }
}

pub fn smooth_l1(delta: f64) -> f64 {
    let a = delta.abs();
    if a < 1.0 {
        0.5 * delta * delta
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(delta: f64) -> f64 {
    if delta.abs() < 1.0 {
        delta
    } else {
        delta.signum()
    }
}

fn clip(p: f64) -> f64 {
    p.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
}

fn bce(p: f64, z: f64) -> (f64, f64) {
    let pc = clip(p);
    let loss = -(z * pc.ln() + (1.0 - z) * (1.0 - pc).ln());
    // clipping has zero derivative outside the open interval
    let grad = if p > PROB_CLIP && p < 1.0 - PROB_CLIP {
        -z / p + (1.0 - z) / (1.0 - p)
    } else {
        0.0
    };
    (loss, grad)
}

/// Smooth-L1 over the eight boundary coordinates of every present slice,
/// summed over slices and averaged over the batch.
///
/// `t_true`, `t_pred`: (N, S, 8); `z_true`: (N, S).
pub fn landmark_loss(
    t_true: ArrayView3<f64>,
    t_pred: ArrayView3<f64>,
    z_true: ArrayView2<f64>,
) -> Result<(f64, Array3<f64>), LossError> {
    if t_true.dim() != t_pred.dim() {
        return Err(LossError::Shape(format!("t_true {:?} vs t_pred {:?}", t_true.dim(), t_pred.dim())));
    }
    let (n, s, _) = t_true.dim();
    if z_true.dim() != (n, s) {
        return Err(LossError::Shape(format!("z_true {:?}, expected {:?}", z_true.dim(), (n, s))));
    }
    let mut grad = Array3::<f64>::zeros(t_true.raw_dim());
    let mut total = 0.0;
    let scale = 1.0 / n.max(1) as f64;
    for i in 0..n {
        for u in 0..s {
            let z = z_true[[i, u]];
            if z != 0.0 && z != 1.0 {
                return Err(LossError::BadLabel(z));
            }
            if z == 0.0 {
                continue;
            }
            for k in 0..t_true.dim().2 {
                let d = t_true[[i, u, k]] - t_pred[[i, u, k]];
                total += smooth_l1(d);
                // d(delta)/d(pred) = -1
                grad[[i, u, k]] = -smooth_l1_grad(d) * scale;
            }
        }
    }
    Ok((total * scale, grad))
}

/// Mean binary cross-entropy of presence probabilities over all slices of
/// all samples. `p_pred`, `z_true`: (N, S).
pub fn cls_loss(p_pred: ArrayView2<f64>, z_true: ArrayView2<f64>) -> Result<(f64, Array2<f64>), LossError> {
    if p_pred.dim() != z_true.dim() {
        return Err(LossError::Shape(format!("p {:?} vs z {:?}", p_pred.dim(), z_true.dim())));
    }
    let count = p_pred.len().max(1) as f64;
    let mut grad = Array2::<f64>::zeros(p_pred.raw_dim());
    let mut total = 0.0;
    Zip::from(&mut grad).and(&p_pred).and(&z_true).for_each(|g, &p, &z| {
        let (l, d) = bce(p, z);
        total += l;
        *g = d / count;
    });
    Ok((total / count, grad))
}

/// Soft Dice loss per sample, averaged over the batch:
/// `1 − (2 Σ p·t + ε) / (Σ p + Σ t + ε)`.
pub fn dice_loss(
    pred: ArrayView4<f64>,
    target: ArrayView4<f64>,
    eps: f64,
) -> Result<(f64, Array4<f64>), LossError> {
    if pred.dim() != target.dim() {
        return Err(LossError::Shape(format!("pred {:?} vs target {:?}", pred.dim(), target.dim())));
    }
    let n = pred.dim().0;
    let mut grad = Array4::<f64>::zeros(pred.raw_dim());
    let mut total = 0.0;
    for i in 0..n {
        let p = pred.index_axis(Axis(0), i);
        let t = target.index_axis(Axis(0), i);
        let inter: f64 = Zip::from(&p).and(&t).fold(0.0, |a, &p, &t| a + p * t);
        let sp = p.sum();
        let st = t.sum();
        let num = 2.0 * inter + eps;
        let den = sp + st + eps;
        total += 1.0 - num / den;
        // d/dp_j [ -num/den ] = -(2 t_j den - num) / den²
        let mut g = grad.index_axis_mut(Axis(0), i);
        Zip::from(&mut g).and(&t).for_each(|g, &t| {
            *g = -(2.0 * t * den - num) / (den * den) / n as f64;
        });
    }
    Ok((total / n.max(1) as f64, grad))
}

/// Pixel-wise binary cross-entropy averaged over every pixel in the batch.
pub fn bce_loss(pred: ArrayView4<f64>, target: ArrayView4<f64>) -> Result<(f64, Array4<f64>), LossError> {
    if pred.dim() != target.dim() {
        return Err(LossError::Shape(format!("pred {:?} vs target {:?}", pred.dim(), target.dim())));
    }
    let count = pred.len().max(1) as f64;
    let mut grad = Array4::<f64>::zeros(pred.raw_dim());
    let mut total = 0.0;
    Zip::from(&mut grad).and(&pred).and(&target).for_each(|g, &p, &t| {
        let (l, d) = bce(p, t);
        total += l;
        *g = d / count;
    });
    Ok((total / count, grad))
}

/// Split flat landmark vectors (N, S·9) into presence (N, S) and
/// coordinates (N, S, 8).
pub fn split_landmarks(v: ArrayView2<f64>) -> Result<(Array2<f64>, Array3<f64>), LossError> {
    let (n, len) = v.dim();
    if len % SLICE_STRIDE != 0 {
        return Err(LossError::Shape(format!("landmark width {len} is not a multiple of {SLICE_STRIDE}")));
    }
    let s = len / SLICE_STRIDE;
    let presence = Array2::from_shape_fn((n, s), |(i, u)| v[[i, u * SLICE_STRIDE]]);
    let coords = Array3::from_shape_fn((n, s, SLICE_STRIDE - 1), |(i, u, k)| v[[i, u * SLICE_STRIDE + 1 + k]]);
    Ok((presence, coords))
}

fn merge_landmark_grads(presence: &Array2<f64>, coords: &Array3<f64>) -> Array2<f64> {
    let (n, s) = presence.dim();
    Array2::from_shape_fn((n, s * SLICE_STRIDE), |(i, j)| {
        let (u, k) = (j / SLICE_STRIDE, j % SLICE_STRIDE);
        if k == 0 {
            presence[[i, u]]
        } else {
            coords[[i, u, k - 1]]
        }
    })
}

/// Gradients of [`total_loss`] with respect to the network outputs.
#[derive(Debug, Clone)]
pub struct LossGradients {
    pub mask: Array4<f64>,
    pub landmarks: Option<Array2<f64>>,
}

/// Landmark head output and its target, both (N, S·9).
pub struct LandmarkTerms<'a> {
    pub pred: ArrayView2<'a, f64>,
    pub truth: ArrayView2<'a, f64>,
}

pub fn total_loss(
    pred_mask: ArrayView4<f64>,
    target_mask: ArrayView4<f64>,
    landmarks: Option<LandmarkTerms<'_>>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, LossGradients), LossError> {
    let (dice, g_dice) = dice_loss(pred_mask, target_mask, cfg.dice_epsilon)?;
    let (ce, g_ce) = bce_loss(pred_mask, target_mask)?;
    let mask = dice + ce;
    let mut out = LossBreakdown {
        total: mask,
        mask,
        dice,
        ce,
        cls: 0.0,
        lnd: 0.0,
    };
    let mut grads = LossGradients {
        mask: g_dice + g_ce,
        landmarks: None,
    };
    if let Some(lt) = landmarks {
        if lt.pred.dim() != lt.truth.dim() || lt.pred.dim().0 != pred_mask.dim().0 {
            return Err(LossError::Shape(format!(
                "landmark pred {:?}, truth {:?}, batch {}",
                lt.pred.dim(),
                lt.truth.dim(),
                pred_mask.dim().0
            )));
        }
        let (p_pred, t_pred) = split_landmarks(lt.pred)?;
        let (z_true, t_true) = split_landmarks(lt.truth)?;
        let (cls, g_cls) = cls_loss(p_pred.view(), z_true.view())?;
        let (lnd, g_lnd) = landmark_loss(t_true.view(), t_pred.view(), z_true.view())?;
        out.cls = cls;
        out.lnd = lnd;
        out.total = mask + cfg.lambda * (cls + lnd);
        let g = merge_landmark_grads(&g_cls, &g_lnd) * cfg.lambda;
        grads.landmarks = Some(g);
    }
    Ok((out, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array};

    #[test]
    fn smooth_l1_fixed_points() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(-2.0), 1.5);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(1.0), 0.5);
        assert_eq!(smooth_l1(-1.0), 0.5);
        assert_eq!(smooth_l1_grad(1.0), 1.0);
        assert_eq!(smooth_l1_grad(-1.0), -1.0);
        let below = 1.0 - 1e-12;
        assert!((smooth_l1_grad(below) - 1.0).abs() < 1e-11);
        assert!((smooth_l1(below) - 0.5).abs() < 1e-11);
    }

    #[test]
    fn landmark_loss_cases() {
        let t = Array::from_shape_fn((1, 2, 8), |(_, u, k)| (u * 8 + k) as f64 * 0.05);
        let z = arr2(&[[1.0, 0.0]]);
        let (l, _) = landmark_loss(t.view(), t.view(), z.view()).unwrap();
        assert_eq!(l, 0.0);
        let off = &t + 0.5;
        let (l, _) = landmark_loss(t.view(), off.view(), z.view()).unwrap();
        assert_eq!(l, 1.0);
        let zeros = arr2(&[[0.0, 0.0]]);
        let wild = &t * 40.0 - 3.0;
        assert_eq!(landmark_loss(t.view(), wild.view(), zeros.view()).unwrap().0, 0.0);
        assert!(landmark_loss(t.view(), wild.view(), arr2(&[[1.0]]).view()).is_err());
    }

    #[test]
    fn cls_loss_cases() {
        let (l, _) = cls_loss(arr2(&[[0.5]]).view(), arr2(&[[1.0]]).view()).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let (l, _) = cls_loss(arr2(&[[1.0]]).view(), arr2(&[[1.0]]).view()).unwrap();
        assert!(l < 1e-6);
        let (l, _) = cls_loss(arr2(&[[0.9, 0.2]]).view(), arr2(&[[1.0, 0.0]]).view()).unwrap();
        let expect = (-(0.9f64).ln() - (0.8f64).ln()) / 2.0;
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 0.1643).abs() < 1e-4);
    }

    #[test]
    fn dice_loss_cases() {
        let t = Array4::from_shape_fn((1, 1, 2, 3), |(_, _, y, x)| ((x + y) % 2) as f64);
        assert!(dice_loss(t.view(), t.view(), 1e-6).unwrap().0.abs() < 1e-6);
        let z = Array4::<f64>::zeros((2, 1, 2, 2));
        assert_eq!(dice_loss(z.view(), z.view(), 1e-6).unwrap().0, 0.0);
        // target {a, b}, prediction {b, c}: one voxel overlaps
        let mut tgt = Array4::<f64>::zeros((1, 1, 1, 3));
        let mut prd = tgt.clone();
        tgt[[0, 0, 0, 0]] = 1.0;
        tgt[[0, 0, 0, 1]] = 1.0;
        prd[[0, 0, 0, 1]] = 1.0;
        prd[[0, 0, 0, 2]] = 1.0;
        let (l, _) = dice_loss(prd.view(), tgt.view(), 0.0).unwrap();
        assert_eq!(l, 0.5);
    }

    #[test]
    fn lambda_zero_total_is_mask() {
        let p = Array4::from_shape_fn((2, 1, 3, 3), |(n, _, y, x)| 0.1 + 0.08 * (n + y + x) as f64);
        let t = p.mapv(|v| (v > 0.3) as u8 as f64);
        let lp = Array2::from_elem((2, 18), 0.3);
        let lt = Array2::from_elem((2, 18), 1.0);
        let cfg = LossConfig { lambda: 0.0, ..Default::default() };
        let (b, g) = total_loss(
            p.view(),
            t.view(),
            Some(LandmarkTerms { pred: lp.view(), truth: lt.view() }),
            &cfg,
        )
        .unwrap();
        assert_eq!(b.total, b.mask);
        assert!(b.cls > 0.0);
        assert!(g.landmarks.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let t = Array4::from_shape_fn((2, 1, 4, 4), |(_, _, y, x)| ((x + 2 * y) % 3 == 0) as u8 as f64);
        let mut lt = Array2::<f64>::zeros((2, 18));
        lt[[0, 0]] = 1.0;
        lt[[0, 3]] = 0.4;
        let (b, _) = total_loss(
            t.view(),
            t.view(),
            Some(LandmarkTerms { pred: lt.view(), truth: lt.view() }),
            &LossConfig::default(),
        )
        .unwrap();
        assert!(b.total <= 1e-3, "{b:?}");
    }

    #[test]
    fn shape_errors() {
        let a = Array4::<f64>::zeros((1, 1, 2, 2));
        let b = Array4::<f64>::zeros((1, 1, 2, 3));
        assert!(total_loss(a.view(), b.view(), None, &LossConfig::default()).is_err());
        let lp = Array2::<f64>::zeros((1, 10));
        assert!(total_loss(
            a.view(),
            a.view(),
            Some(LandmarkTerms { pred: lp.view(), truth: lp.view() }),
            &LossConfig::default()
        )
        .is_err());
    }
}
