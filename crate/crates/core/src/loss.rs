//! Image losses: Gaussian-window structural similarity and mean squared
//! error, combined into the training objective.

use crate::diff::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::renderer::gaussian_psf;

/// Structural-similarity parameters. Window statistics come from a
/// normalized Gaussian window slid with zero padding, so the score map
/// has the image's shape. Stabilizers assume images in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsimConfig {
    pub window_size: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window_size: 11,
            sigma: 1.5,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

/// Mean similarity and the per-pixel similarity map:
///   s = (2 mu_x mu_y + c1)(2 cov + c2)
///       / ((mu_x^2 + mu_y^2 + c1)(var_x + var_y + c2)).
///
/// With a normalized window and zero padding both denominator factors
/// stay strictly positive (weighted variances cannot go negative), so
/// the division needs no guard.
pub fn ssim<F: Scalar>(
    tape: &mut Tape<F>,
    pred: Tensor,
    target: Tensor,
    cfg: &SsimConfig,
) -> Result<(Tensor, Tensor)> {
    let sp = tape.shape(pred).to_vec();
    let st = tape.shape(target).to_vec();
    if sp != st {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: sp,
            rhs: st,
        });
    }
    if sp.len() != 2 {
        return Err(Error::BadRank {
            op: "ssim",
            expected: 2,
            shape: sp,
        });
    }
    let window = std::sync::Arc::new(gaussian_psf::<F>(cfg.window_size, cfg.sigma, cfg.sigma)?);

    let mu_x = tape.conv2d_same(pred, window.clone())?;
    let mu_y = tape.conv2d_same(target, window.clone())?;
    let xx = tape.mul(pred, pred)?;
    let yy = tape.mul(target, target)?;
    let xy = tape.mul(pred, target)?;
    let e_xx = tape.conv2d_same(xx, window.clone())?;
    let e_yy = tape.conv2d_same(yy, window.clone())?;
    let e_xy = tape.conv2d_same(xy, window)?;

    let mu_xx = tape.mul(mu_x, mu_x)?;
    let mu_yy = tape.mul(mu_y, mu_y)?;
    let mu_xy = tape.mul(mu_x, mu_y)?;
    let var_x = tape.sub(e_xx, mu_xx)?;
    let var_y = tape.sub(e_yy, mu_yy)?;
    let cov = tape.sub(e_xy, mu_xy)?;

    let n1 = tape.scale(mu_xy, 2.0);
    let n1 = tape.shift(n1, cfg.c1);
    let n2 = tape.scale(cov, 2.0);
    let n2 = tape.shift(n2, cfg.c2);
    let num = tape.mul(n1, n2)?;

    let d1 = tape.add(mu_xx, mu_yy)?;
    let d1 = tape.shift(d1, cfg.c1);
    let d2 = tape.add(var_x, var_y)?;
    let d2 = tape.shift(d2, cfg.c2);
    let den = tape.mul(d1, d2)?;

    let map = tape.div(num, den)?;
    let mean = tape.mean(map);
    Ok((mean, map))
}

/// Mean squared difference as a scalar tensor.
pub fn l2_mean<F: Scalar>(tape: &mut Tape<F>, pred: Tensor, target: Tensor) -> Result<Tensor> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Weighting between the similarity and squared-error terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of (1 - ssim); the squared error gets the complement.
    pub ssim_weight: f64,
    pub ssim: SsimConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            ssim_weight: 0.9,
            ssim: SsimConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ssim_weight) {
            return Err(Error::config(format!(
                "ssim_weight {} outside [0, 1]",
                self.ssim_weight
            )));
        }
        Ok(())
    }
}

/// w * (1 - ssim) + (1 - w) * mean squared error, as a scalar tensor.
pub fn combined_loss<F: Scalar>(
    tape: &mut Tape<F>,
    pred: Tensor,
    target: Tensor,
    cfg: &LossConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let (ssim_mean, _) = ssim(tape, pred, target, &cfg.ssim)?;
    let one = tape.scalar(F::ONE);
    let dissim = tape.sub(one, ssim_mean)?;
    let weighted_dissim = tape.scale(dissim, cfg.ssim_weight);
    let l2 = l2_mean(tape, pred, target)?;
    let weighted_l2 = tape.scale(l2, 1.0 - cfg.ssim_weight);
    tape.add(weighted_dissim, weighted_l2)
}

/// Plain-value SSIM between two grids (mean over the map).
pub fn ssim_value(a: &Grid, b: &Grid, cfg: &SsimConfig) -> Result<f64> {
    let mut tape: Tape<f64> = Tape::new();
    tape.set_recording(false);
    let shape = vec![a.scanlines, a.depth];
    let ta = tape.leaf(a.data.iter().map(|&v| v as f64).collect(), shape.clone())?;
    let tb = tape.leaf(b.data.iter().map(|&v| v as f64).collect(), shape)?;
    let (mean, _) = ssim(&mut tape, ta, tb, cfg)?;
    tape.scalar_value(mean)
}

/// Summary of per-frame scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreStats {
    pub mean: f64,
    pub median: f64,
    pub per_frame: Vec<f64>,
}

impl ScoreStats {
    pub fn from_scores(per_frame: Vec<f64>) -> Result<Self> {
        if per_frame.is_empty() {
            return Err(Error::EmptyInput {
                what: "score stats",
            });
        }
        let mean = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
        let mut sorted = per_frame.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Ok(ScoreStats {
            mean,
            median,
            per_frame,
        })
    }
}
