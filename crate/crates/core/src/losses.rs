//! Boundary-aware depth loss and the gradient/normal terms it is trained with.
//!
//! Every loss here is a mean over the ground-truth validity mask. The Sobel
//! gradients of the prediction are taken with the ground-truth mask as well,
//! so prediction values at invalid pixels never influence any loss.
//!
//! [`LossTerms::evaluate`] returns both the loss values and their analytic
//! gradient with respect to every prediction pixel, which is what the trainer
//! back-propagates into the network.

use serde::{Deserialize, Serialize};

use crate::depth_geometry::{sobel_adjoint, sobel_raw, DepthMap, GradientField};
use crate::error::{Error, Result};

/// Added inside every `ln(|.| + 0.5)` term.
pub const LOG_OFFSET: f64 = 0.5;
/// Guard on the cosine denominator of the normal term.
pub const NORMAL_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    MeanOverValid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Boundary awareness factor.
    pub alpha: f64,
    /// Clamp the boundary weight at zero.
    pub clamp_weight: bool,
    /// Added to the mean GT gradient magnitude in the weight's denominator.
    pub denom_epsilon: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            clamp_weight: true,
            denom_epsilon: 1e-6,
            reduction: Reduction::MeanOverValid,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("loss.alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.denom_epsilon > 0.0) || !self.denom_epsilon.is_finite() {
            return Err(Error::Config(format!(
                "loss.denom_epsilon must be > 0, got {}",
                self.denom_epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OmegaStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_bad: f64,
    pub l_grad: f64,
    pub l_normal: f64,
    pub l_total: f64,
    pub omega_stats: OmegaStats,
}

#[inline]
fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_finite(values: &[f64], valid: &[bool], what: &'static str) -> Result<()> {
    if values.iter().zip(valid).any(|(v, &ok)| ok && !v.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    Ok(())
}

/// Boundary weight per pixel; invalid pixels get 0.
pub fn boundary_weight(gt_grad: &GradientField, pred_grad: &GradientField, valid: &[bool], cfg: &LossConfig) -> Result<Vec<f64>> {
    let n = gt_grad.gx.len();
    if pred_grad.gx.len() != n || valid.len() != n {
        return Err(Error::ShapeMismatch("gradient fields and mask differ in size".into()));
    }
    let count = valid.iter().filter(|&&b| b).count();
    if count == 0 {
        return Err(Error::AllInvalid);
    }
    let denom = mean_gt_magnitude(gt_grad, valid, count) + cfg.denom_epsilon;
    Ok((0..n)
        .map(|i| {
            if valid[i] {
                raw_to_weight(raw_weight(gt_grad, pred_grad, i, denom), cfg)
            } else {
                0.0
            }
        })
        .collect())
}

fn mean_gt_magnitude(gt: &GradientField, valid: &[bool], count: usize) -> f64 {
    let sum: f64 = (0..valid.len())
        .filter(|&i| valid[i])
        .map(|i| gt.gx[i].abs() + gt.gy[i].abs())
        .sum();
    sum / count as f64
}

#[inline]
fn raw_weight(gt: &GradientField, pred: &GradientField, i: usize, denom: f64) -> f64 {
    let truth = (gt.gx[i].abs() + gt.gy[i].abs() + LOG_OFFSET).ln();
    let error = (gt.gx[i] - pred.gx[i]).abs() + (gt.gy[i] - pred.gy[i]).abs();
    truth / denom * error
}

#[inline]
fn raw_to_weight(raw: f64, cfg: &LossConfig) -> f64 {
    if cfg.clamp_weight {
        raw.max(0.0)
    } else {
        raw
    }
}

/// Validated inputs shared by all terms.
struct Prepared<'a> {
    gt: &'a DepthMap,
    pred: &'a DepthMap,
    count: f64,
    g: GradientField,
    p: GradientField,
}

impl<'a> Prepared<'a> {
    fn new(gt: &'a DepthMap, pred: &'a DepthMap) -> Result<Self> {
        gt.ensure_same_dims(pred)?;
        let count = gt.valid_count();
        if count == 0 {
            return Err(Error::AllInvalid);
        }
        check_finite(gt.values(), gt.valid(), "ground-truth depth")?;
        check_finite(pred.values(), gt.valid(), "predicted depth")?;
        let (w, h) = (gt.width(), gt.height());
        let g = sobel_raw(gt.values(), gt.valid(), w, h)?;
        let p = sobel_raw(pred.values(), gt.valid(), w, h)?;
        Ok(Self {
            gt,
            pred,
            count: count as f64,
            g,
            p,
        })
    }

    fn valid_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.gt.len()).filter(|&i| self.gt.valid()[i])
    }
}

/// Mean over valid pixels of `(1 + alpha * omega) * ln(|d - d_hat| + 0.5)`.
pub fn bad_loss(gt: &DepthMap, pred: &DepthMap, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(LossTerms::evaluate(gt, pred, cfg, false)?.report.l_bad)
}

/// Mean over valid pixels of `ln(|d - d_hat| + 0.5)`: the boundary-blind depth term.
pub fn depth_term(gt: &DepthMap, pred: &DepthMap) -> Result<f64> {
    let cfg = LossConfig {
        alpha: 0.0,
        ..LossConfig::default()
    };
    bad_loss(gt, pred, &cfg)
}

/// Mean over valid pixels of `ln(|gx - gx_hat| + 0.5) + ln(|gy - gy_hat| + 0.5)`.
pub fn grad_loss(gt: &DepthMap, pred: &DepthMap) -> Result<f64> {
    Ok(LossTerms::evaluate(gt, pred, &LossConfig::default(), false)?.report.l_grad)
}

/// Mean over valid pixels of `1 - cos` between the surface normals
/// `(-gx, -gy, 1)` of ground truth and prediction.
pub fn normal_loss(gt: &DepthMap, pred: &DepthMap) -> Result<f64> {
    Ok(LossTerms::evaluate(gt, pred, &LossConfig::default(), false)?.report.l_normal)
}

pub fn total_loss(gt: &DepthMap, pred: &DepthMap, cfg: &LossConfig) -> Result<LossReport> {
    cfg.validate()?;
    Ok(LossTerms::evaluate(gt, pred, cfg, false)?.report)
}

/// Loss values plus, optionally, `d l_total / d pred` per pixel.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub report: LossReport,
    /// Empty unless requested; zero at invalid pixels.
    pub grad: Vec<f64>,
}

impl LossTerms {
    pub fn evaluate(gt: &DepthMap, pred: &DepthMap, cfg: &LossConfig, with_grad: bool) -> Result<Self> {
        let prep = Prepared::new(gt, pred)?;
        let n = gt.len();
        let denom = mean_gt_magnitude(&prep.g, gt.valid(), prep.count as usize) + cfg.denom_epsilon;
        let inv = 1.0 / prep.count;

        let (mut bad, mut grad_term, mut normal) = (0.0, 0.0, 0.0);
        let (mut wmin, mut wmax, mut wsum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        let mut direct = if with_grad { vec![0.0; n] } else { Vec::new() };
        let mut dpx = if with_grad { vec![0.0; n] } else { Vec::new() };
        let mut dpy = if with_grad { vec![0.0; n] } else { Vec::new() };

        for i in prep.valid_indices() {
            let (gx, gy) = (prep.g.gx[i], prep.g.gy[i]);
            let (px, py) = (prep.p.gx[i], prep.p.gy[i]);

            let raw = raw_weight(&prep.g, &prep.p, i, denom);
            let omega = raw_to_weight(raw, cfg);
            wmin = wmin.min(omega);
            wmax = wmax.max(omega);
            wsum += omega;

            let err = prep.pred.values()[i] - prep.gt.values()[i];
            let log_err = (err.abs() + LOG_OFFSET).ln();
            bad += (1.0 + cfg.alpha * omega) * log_err;

            let (ex, ey) = (px - gx, py - gy);
            grad_term += (ex.abs() + LOG_OFFSET).ln() + (ey.abs() + LOG_OFFSET).ln();

            let nn = (gx * gx + gy * gy + 1.0).sqrt();
            let un = (px * px + py * py + 1.0).sqrt();
            let dot = gx * px + gy * py + 1.0;
            let norm = nn * un;
            let guarded = norm.max(NORMAL_GUARD);
            let cos = dot / guarded;
            normal += 1.0 - cos;

            if with_grad {
                direct[i] = (1.0 + cfg.alpha * omega) * sgn(err) / (err.abs() + LOG_OFFSET) * inv;

                // Boundary weight depends on the prediction only through its
                // gradient error; the clamp has zero slope where it is active.
                let dw_derr = if !cfg.clamp_weight || raw > 0.0 {
                    (gx.abs() + gy.abs() + LOG_OFFSET).ln() / denom
                } else {
                    0.0
                };
                let bad_scale = cfg.alpha * log_err * dw_derr;
                let mut gxp = bad_scale * sgn(ex) + sgn(ex) / (ex.abs() + LOG_OFFSET);
                let mut gyp = bad_scale * sgn(ey) + sgn(ey) / (ey.abs() + LOG_OFFSET);

                // u = (-px, -py, 1): d(1 - cos)/dpx = d cos / du_x.
                let (dcos_dux, dcos_duy) = if norm > NORMAL_GUARD {
                    let k = cos / (un * un);
                    (-gx / norm - k * (-px), -gy / norm - k * (-py))
                } else {
                    (-gx / guarded, -gy / guarded)
                };
                gxp += dcos_dux;
                gyp += dcos_duy;

                dpx[i] = gxp * inv;
                dpy[i] = gyp * inv;
            }
        }

        let l_bad = bad * inv;
        let l_grad = grad_term * inv;
        let l_normal = normal * inv;
        let report = LossReport {
            l_bad,
            l_grad,
            l_normal,
            l_total: l_bad + l_grad + l_normal,
            omega_stats: OmegaStats {
                min: wmin,
                mean: wsum * inv,
                max: wmax,
            },
        };
        if !report.l_total.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let grad = if with_grad {
            let mut g = sobel_adjoint(&dpx, &dpy, gt.valid(), gt.width(), gt.height());
            for (a, b) in g.iter_mut().zip(&direct) {
                *a += b;
            }
            g
        } else {
            Vec::new()
        };
        Ok(Self { report, grad })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depth_geometry::sobel_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN_HALF: f64 = -std::f64::consts::LN_2;

    fn random_pair(rng: &mut ChaCha8Rng, w: usize, h: usize) -> (DepthMap, DepthMap) {
        let gt = DepthMap::from_fn(w, h, |_, _| rng.gen_range(0.5..6.0)).unwrap();
        let pred = DepthMap::from_fn(w, h, |_, _| rng.gen_range(0.5..6.0)).unwrap();
        (gt, pred)
    }

    /// Clamped 3x3 Sobel, written out directly (all pixels valid).
    fn oracle_sobel(d: &DepthMap) -> (Vec<f64>, Vec<f64>) {
        let (w, h) = (d.width() as isize, d.height() as isize);
        let at = |x: isize, y: isize| d.at(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize);
        let mut gx = Vec::new();
        let mut gy = Vec::new();
        for y in 0..h {
            for x in 0..w {
                gx.push(at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1) - at(x - 1, y - 1) - 2.0 * at(x - 1, y) - at(x - 1, y + 1));
                gy.push(at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1) - at(x - 1, y - 1) - 2.0 * at(x, y - 1) - at(x + 1, y - 1));
            }
        }
        (gx, gy)
    }

    fn oracle_bad(gt: &DepthMap, pred: &DepthMap, alpha: f64, clamp: bool, eps: f64) -> f64 {
        let (gx, gy) = oracle_sobel(gt);
        let (px, py) = oracle_sobel(pred);
        let n = gt.len() as f64;
        let mean_mag: f64 = gx.iter().zip(&gy).map(|(a, b)| a.abs() + b.abs()).sum::<f64>() / n;
        let mut total = 0.0;
        for i in 0..gt.len() {
            let mut w = (gx[i].abs() + gy[i].abs() + 0.5).ln() / (mean_mag + eps) * ((gx[i] - px[i]).abs() + (gy[i] - py[i]).abs());
            if clamp && w < 0.0 {
                w = 0.0;
            }
            total += (1.0 + alpha * w) * ((gt.values()[i] - pred.values()[i]).abs() + 0.5).ln();
        }
        total / n
    }

    fn oracle_grad(gt: &DepthMap, pred: &DepthMap) -> f64 {
        let (gx, gy) = oracle_sobel(gt);
        let (px, py) = oracle_sobel(pred);
        (0..gt.len())
            .map(|i| ((gx[i] - px[i]).abs() + 0.5).ln() + ((gy[i] - py[i]).abs() + 0.5).ln())
            .sum::<f64>()
            / gt.len() as f64
    }

    fn oracle_normal(gt: &DepthMap, pred: &DepthMap) -> f64 {
        let (gx, gy) = oracle_sobel(gt);
        let (px, py) = oracle_sobel(pred);
        (0..gt.len())
            .map(|i| {
                let a = [-gx[i], -gy[i], 1.0];
                let b = [-px[i], -py[i], 1.0];
                let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                1.0 - dot / (na * nb).max(1e-8)
            })
            .sum::<f64>()
            / gt.len() as f64
    }

    #[test]
    fn identical_gradients_give_zero_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (gt, _) = random_pair(&mut rng, 6, 6);
        let g = sobel_gradients(&gt).unwrap();
        let w = boundary_weight(&g, &g, gt.valid(), &LossConfig::default()).unwrap();
        assert!(w.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn flat_truth_clamps_negative_weight() {
        let gt = DepthMap::constant(5, 5, 2.0).unwrap();
        let g = sobel_gradients(&gt).unwrap();
        let mut p = g.clone();
        p.gx[12] = 1.0;
        p.gy[12] = -1.0;
        let w = boundary_weight(&g, &p, gt.valid(), &LossConfig::default()).unwrap();
        assert_eq!(w[12], 0.0);
        let literal = LossConfig {
            clamp_weight: false,
            ..LossConfig::default()
        };
        let raw = boundary_weight(&g, &p, gt.valid(), &literal).unwrap();
        // ln(0.5) * 2 / 1e-6
        assert!((raw[12] - LN_HALF * 2.0 / 1e-6).abs() < 1e-3);
    }

    #[test]
    fn step_weight_matches_per_pixel_evaluation() {
        let gt = DepthMap::from_fn(4, 4, |u, _| if u < 2 { 1.0 } else { 3.0 }).unwrap();
        let pred = gt.map_values(|v| 0.5 * v).unwrap();
        let cfg = LossConfig::default();
        let w = boundary_weight(&sobel_gradients(&gt).unwrap(), &sobel_gradients(&pred).unwrap(), gt.valid(), &cfg).unwrap();
        let (gx, gy) = oracle_sobel(&gt);
        let (px, py) = oracle_sobel(&pred);
        let mean: f64 = (0..16).map(|i| gx[i].abs() + gy[i].abs()).sum::<f64>() / 16.0;
        for i in 0..16 {
            let raw = (gx[i].abs() + gy[i].abs() + 0.5).ln() / (mean + 1e-6) * ((gx[i] - px[i]).abs() + (gy[i] - py[i]).abs());
            assert!((w[i] - raw.max(0.0)).abs() < 1e-12, "pixel {i}");
        }
        assert!(w.iter().any(|&x| x > 0.0));
    }

    #[test]
    fn identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (gt, _) = random_pair(&mut rng, 8, 8);
        let cfg = LossConfig::default();
        assert!((bad_loss(&gt, &gt, &cfg).unwrap() - LN_HALF).abs() < 1e-12);
        assert!((grad_loss(&gt, &gt).unwrap() - 2.0 * LN_HALF).abs() < 1e-12);
        assert!(normal_loss(&gt, &gt).unwrap().abs() < 1e-12);
        let r = total_loss(&gt, &gt, &cfg).unwrap();
        assert!((r.l_total - 3.0 * LN_HALF).abs() < 1e-12);

        let shifted = gt.map_values(|v| v + 0.5).unwrap();
        assert!(bad_loss(&gt, &shifted, &cfg).unwrap().abs() < 1e-12);
        assert!((grad_loss(&gt, &shifted).unwrap() - 2.0 * LN_HALF).abs() < 1e-9);
    }

    #[test]
    fn random_pairs_match_scalar_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (gt, pred) = random_pair(&mut rng, 8, 8);
            for clamp in [true, false] {
                let cfg = LossConfig {
                    clamp_weight: clamp,
                    ..LossConfig::default()
                };
                let got = bad_loss(&gt, &pred, &cfg).unwrap();
                assert!((got - oracle_bad(&gt, &pred, 0.3, clamp, 1e-6)).abs() < 1e-6);
            }
            assert!((grad_loss(&gt, &pred).unwrap() - oracle_grad(&gt, &pred)).abs() < 1e-6);
            let nl = normal_loss(&gt, &pred).unwrap();
            assert!((nl - oracle_normal(&gt, &pred)).abs() < 1e-6);
            assert!((0.0..=2.0).contains(&nl));
        }
    }

    #[test]
    fn clamp_toggle_only_changes_bad_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Gentle truth slopes make the log factor negative.
        let gt = DepthMap::from_fn(8, 8, |u, v| 2.0 + 0.01 * u as f64 + 0.005 * v as f64).unwrap();
        let pred = DepthMap::from_fn(8, 8, |_, _| rng.gen_range(1.0..3.0)).unwrap();
        let a = total_loss(&gt, &pred, &LossConfig::default()).unwrap();
        let b = total_loss(
            &gt,
            &pred,
            &LossConfig {
                clamp_weight: false,
                ..LossConfig::default()
            },
        )
        .unwrap();
        assert_eq!(a.l_grad, b.l_grad);
        assert_eq!(a.l_normal, b.l_normal);
        assert_ne!(a.l_bad, b.l_bad);
    }

    #[test]
    fn alpha_zero_is_plain_depth_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (gt, pred) = random_pair(&mut rng, 8, 8);
        let plain: f64 = gt
            .values()
            .iter()
            .zip(pred.values())
            .map(|(a, b)| ((a - b).abs() + 0.5).ln())
            .sum::<f64>()
            / 64.0;
        let cfg = LossConfig {
            alpha: 0.0,
            ..LossConfig::default()
        };
        assert!((bad_loss(&gt, &pred, &cfg).unwrap() - plain).abs() < 1e-12);
    }

    #[test]
    fn invalid_prediction_pixels_are_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (gt, pred) = random_pair(&mut rng, 8, 8);
        let mut values = gt.values().to_vec();
        values[9] = 0.0;
        values[30] = f64::NAN;
        let gt = DepthMap::from_values(8, 8, values).unwrap();
        let mut alt = pred.values().to_vec();
        alt[9] = 100.0;
        alt[30] = 0.01;
        let alt = DepthMap::from_values(8, 8, alt).unwrap();
        let cfg = LossConfig::default();
        assert_eq!(total_loss(&gt, &pred, &cfg).unwrap(), total_loss(&gt, &alt, &cfg).unwrap());
    }

    #[test]
    fn errors() {
        let gt = DepthMap::from_values(4, 4, vec![0.0; 16]).unwrap();
        assert!(matches!(bad_loss(&gt, &gt, &LossConfig::default()), Err(Error::AllInvalid)));
        let a = DepthMap::constant(4, 4, 1.0).unwrap();
        let b = DepthMap::constant(5, 4, 1.0).unwrap();
        assert!(matches!(grad_loss(&a, &b), Err(Error::ShapeMismatch(_))));
        let neg = LossConfig {
            alpha: -1.0,
            ..LossConfig::default()
        };
        assert!(matches!(bad_loss(&a, &a, &neg), Err(Error::Config(_))));
    }

    /// Pixels whose perturbation could cross an `|.|` or clamp kink.
    fn near_kink(gt: &DepthMap, pred: &DepthMap, cfg: &LossConfig, k: usize) -> bool {
        let (w, h) = (gt.width(), gt.height());
        let g = sobel_gradients(gt).unwrap();
        let p = sobel_gradients(pred).unwrap();
        let raw = boundary_weight(&g, &p, gt.valid(), &LossConfig { clamp_weight: false, ..*cfg }).unwrap();
        let (u, v) = ((k % w) as isize, (k / w) as isize);
        if (pred.values()[k] - gt.values()[k]).abs() < 1e-3 {
            return true;
        }
        for dv in -2..=2 {
            for du in -2..=2 {
                let (x, y) = (u + du, v + dv);
                if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                    continue;
                }
                let j = y as usize * w + x as usize;
                if (p.gx[j] - g.gx[j]).abs() < 1e-2 || (p.gy[j] - g.gy[j]).abs() < 1e-2 || raw[j].abs() < 1e-2 {
                    return true;
                }
            }
        }
        false
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = LossConfig::default();
        let h = 1e-4;
        let mut checked = 0;
        for _ in 0..3 {
            let (gt, pred) = random_pair(&mut rng, 8, 8);
            let terms = LossTerms::evaluate(&gt, &pred, &cfg, true).unwrap();
            for k in 0..64 {
                if near_kink(&gt, &pred, &cfg, k) {
                    continue;
                }
                let shifted = |d: f64| {
                    let mut v = pred.values().to_vec();
                    v[k] += d;
                    total_loss(&gt, &DepthMap::from_values(8, 8, v).unwrap(), &cfg).unwrap().l_total
                };
                let num = (shifted(h) - shifted(-h)) / (2.0 * h);
                let a = terms.grad[k];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                assert!(rel < 1e-4, "pixel {k}: analytic {a} numeric {num}");
                checked += 1;
            }
        }
        assert!(checked > 20, "{checked}");
    }
}
