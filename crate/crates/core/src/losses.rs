//! Pointmap regression and confidence losses, as plain evaluators.
//!
//! The valid-pixel set is the ground-truth validity mask.

use crate::geom::{Pointmap, ScalarMap};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("prediction is {pred_w}x{pred_h} but ground truth is {gt_w}x{gt_h}")]
    DimensionMismatch {
        pred_w: usize,
        pred_h: usize,
        gt_w: usize,
        gt_h: usize,
    },
    #[error("no valid ground-truth pixels")]
    NoValidPixels,
    #[error("prediction is invalid at ground-truth-valid pixel {0}")]
    MissingPrediction(usize),
    #[error("normalisation scale is zero")]
    ZeroScale,
    #[error("confidence {value} at pixel {index} is not positive")]
    NonPositiveConfidence { index: usize, value: f64 },
    #[error("alpha must be positive, got {0}")]
    InvalidAlpha(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    /// Weight of the `-log C` regulariser.
    pub alpha: f64,
    /// Use the metric variant (`z := z̄`).
    pub metric_mode: bool,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            metric_mode: false,
        }
    }
}

/// Mean distance to the origin over `valid` pixels.
fn mean_norm(pm: &Pointmap, valid: &[bool]) -> f64 {
    let (sum, n) = pm
        .points
        .iter()
        .zip(valid)
        .filter(|(_, &v)| v)
        .fold((0.0, 0usize), |(s, n), (p, _)| (s + p.norm(), n + 1));
    sum / n as f64
}

/// Per-pixel regression loss; pixels outside the ground-truth mask hold 0.
///
/// Non-metric: `‖X/z − X̄/z̄‖²` where `z`, `z̄` are the mean distances of the
/// valid predicted and ground-truth points to the origin.
/// Metric: `‖X − X̄‖² / z̄`.
pub fn regr_loss(pred: &Pointmap, gt: &Pointmap, metric_mode: bool) -> Result<ScalarMap, LossError> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(LossError::DimensionMismatch {
            pred_w: pred.width,
            pred_h: pred.height,
            gt_w: gt.width,
            gt_h: gt.height,
        });
    }
    if gt.valid_count() == 0 {
        return Err(LossError::NoValidPixels);
    }
    if let Some(i) = (0..gt.len()).find(|&i| gt.valid[i] && !pred.valid[i]) {
        return Err(LossError::MissingPrediction(i));
    }
    let z_gt = mean_norm(gt, &gt.valid);
    let z_pred = if metric_mode { z_gt } else { mean_norm(pred, &gt.valid) };
    if !(z_gt > 0.0) || !(z_pred > 0.0) {
        return Err(LossError::ZeroScale);
    }
    let data = (0..gt.len())
        .map(|i| {
            if !gt.valid[i] {
                0.0
            } else if metric_mode {
                (pred.points[i] - gt.points[i]).norm_squared() / z_gt
            } else {
                (pred.points[i] / z_pred - gt.points[i] / z_gt).norm_squared()
            }
        })
        .collect();
    Ok(ScalarMap::new(gt.width, gt.height, data).expect("sized"))
}

/// `Σ_{i ∈ D} C_i ℓ_regr(i) − α log C_i` for one view.
pub fn conf_loss(
    pred: &Pointmap,
    gt: &Pointmap,
    confidence: &ScalarMap,
    params: &LossParams,
) -> Result<f64, LossError> {
    if !(params.alpha > 0.0) {
        return Err(LossError::InvalidAlpha(params.alpha));
    }
    if confidence.width != gt.width || confidence.height != gt.height {
        return Err(LossError::DimensionMismatch {
            pred_w: confidence.width,
            pred_h: confidence.height,
            gt_w: gt.width,
            gt_h: gt.height,
        });
    }
    let regr = regr_loss(pred, gt, params.metric_mode)?;
    let mut total = 0.0;
    for i in 0..gt.len() {
        if !gt.valid[i] {
            continue;
        }
        let c = confidence.data[i];
        if !(c > 0.0) {
            return Err(LossError::NonPositiveConfidence { index: i, value: c });
        }
        total += c * regr.data[i] - params.alpha * c.ln();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize, invalid_frac: f64) -> Pointmap {
        let points = (0..w * h)
            .map(|_| Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(0.5..5.0)))
            .collect();
        let valid = (0..w * h).map(|_| rng.random::<f64>() >= invalid_frac).collect();
        Pointmap::new(w, h, points, valid).unwrap()
    }

    fn constant_map(p: Vec3, n: usize) -> Pointmap {
        Pointmap::new(n, 1, vec![p; n], vec![true; n]).unwrap()
    }

    #[test]
    fn identical_maps_have_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random_map(&mut rng, 7, 5, 0.2);
        for metric in [false, true] {
            assert!(regr_loss(&gt, &gt, metric).unwrap().data.iter().all(|&l| l == 0.0));
        }
    }

    #[test]
    fn metric_mode_hand_value() {
        let gt = constant_map(Vec3::new(0.0, 0.0, 1.0), 6);
        let pred = constant_map(Vec3::new(0.0, 0.0, 1.1), 6);
        for l in regr_loss(&pred, &gt, true).unwrap().data {
            assert!((l - 0.01).abs() < 1e-15);
        }
    }

    #[test]
    fn conf_loss_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = random_map(&mut rng, 6, 4, 0.25);
        let n = gt.valid_count() as f64;
        let ones = ScalarMap::filled(6, 4, 1.0);
        let p = LossParams { alpha: 0.2, metric_mode: false };
        assert_eq!(conf_loss(&gt, &gt, &ones, &p).unwrap(), 0.0);
        let e = ScalarMap::filled(6, 4, std::f64::consts::E);
        let p = LossParams { alpha: 1.0, metric_mode: false };
        assert!((conf_loss(&gt, &gt, &e, &p).unwrap() + n).abs() < 1e-12);
    }

    #[test]
    fn conf_loss_rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = random_map(&mut rng, 3, 3, 0.0);
        let mut c = ScalarMap::filled(3, 3, 1.0);
        c.data[4] = 0.0;
        assert!(matches!(
            conf_loss(&gt, &gt, &c, &LossParams::default()),
            Err(LossError::NonPositiveConfidence { index: 4, .. })
        ));
        let empty = Pointmap::new(2, 1, vec![Vec3::zeros(); 2], vec![false; 2]).unwrap();
        assert_eq!(regr_loss(&empty, &empty, false), Err(LossError::NoValidPixels));
        let zero = constant_map(Vec3::zeros(), 3);
        assert_eq!(regr_loss(&zero, &zero, true), Err(LossError::ZeroScale));
    }

    #[test]
    fn confidence_minimiser_is_alpha_over_loss() {
        // d/dC (C ℓ − α log C) = 0 at C = α / ℓ; scan numerically.
        let (alpha, loss) = (0.2, 0.37);
        let f = |c: f64| c * loss - alpha * c.ln();
        let best = (1..20000)
            .map(|k| k as f64 * 1e-4)
            .min_by(|a, b| f(*a).total_cmp(&f(*b)))
            .unwrap();
        assert!((best - alpha / loss).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn non_metric_scale_invariance(seed in 0u64..500, a in 0.1f64..20.0, b in 0.1f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_map(&mut rng, 5, 4, 0.2);
            let mut pred = random_map(&mut rng, 5, 4, 0.0);
            pred.valid = vec![true; 20];
            let base = regr_loss(&pred, &gt, false).unwrap();
            let scaled = regr_loss(&pred.scaled(a), &gt.scaled(b), false).unwrap();
            for (x, y) in base.data.iter().zip(&scaled.data) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-12));
            }
        }

        #[test]
        fn metric_linear_under_joint_scaling(seed in 0u64..500, a in 0.1f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_map(&mut rng, 5, 4, 0.2);
            let mut pred = random_map(&mut rng, 5, 4, 0.0);
            pred.valid = vec![true; 20];
            let base = regr_loss(&pred, &gt, true).unwrap();
            let scaled = regr_loss(&pred.scaled(a), &gt.scaled(a), true).unwrap();
            for (x, y) in base.data.iter().zip(&scaled.data) {
                prop_assert!((x * a - y).abs() <= 1e-12 * y.abs().max(1e-12));
            }
        }
    }
}
