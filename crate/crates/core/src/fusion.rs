//! Inverse-variance-weighted merging of a KD trajectory with its
//! residual-corrected counterpart `y^ad = y^kd + y^res`.
//!
//! Everything here is per (step, axis) scalar arithmetic; the caller decides
//! the frame. The pipeline fuses in the ego frame, where the KD prior and the
//! residual variances are both diagonal.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::trajectory::GaussianTrajectory;
use crate::VAR_FLOOR;

/// Denominators at or below this are treated as degenerate.
pub const DEGENERATE_DENOMINATOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Minimum-variance weights.
    Ivw,
    /// `w = 0, w̃ = 1`: KD mean plus residual mean.
    SimpleAdd,
    /// Minimum-variance weights between the KD trajectory and an independently
    /// predicted full trajectory.
    ViIndependent,
    /// As `ViIndependent` with the KD variance replaced by a constant.
    ViFixed,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Ivw => "ivw",
            FusionMode::SimpleAdd => "simple_add",
            FusionMode::ViIndependent => "vi_independent",
            FusionMode::ViFixed => "vi_fixed",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            FusionMode::Ivw,
            FusionMode::SimpleAdd,
            FusionMode::ViIndependent,
            FusionMode::ViFixed,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| {
            Error::Config(format!(
                "unknown fusion mode '{s}' (expected ivw | simple_add | vi_independent | vi_fixed)"
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// Cross-covariance between the two estimates, m².
    pub sigma_cross: f64,
    /// KD variance used by `vi_fixed`, m².
    pub vi_fixed_sigma_kd: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            mode: FusionMode::Ivw,
            sigma_cross: 0.0,
            vi_fixed_sigma_kd: 1.0,
        }
    }
}

impl FusionConfig {
    pub fn with_mode(mode: FusionMode) -> Self {
        FusionConfig {
            mode,
            ..Self::default()
        }
    }
}

/// Minimum-variance weights `(w, w̃)` for the KD estimate and the adjusted
/// estimate, clamped to `[0, 1]` so that `w + w̃ = 1` stays a convex combination.
pub fn ivw_weights(sigma_kd: f64, sigma_ad: f64, sigma_cross: f64) -> Result<(f64, f64)> {
    let den = sigma_ad + sigma_kd - 2.0 * sigma_cross;
    if den.is_nan() || den <= DEGENERATE_DENOMINATOR {
        return Err(Error::DegenerateFusion(den));
    }
    let wt = ((sigma_kd - sigma_cross) / den).clamp(0.0, 1.0);
    Ok((1.0 - wt, wt))
}

pub fn merged_variance(sigma_kd: f64, sigma_ad: f64, sigma_cross: f64, w: f64, wt: f64) -> f64 {
    (w * w * sigma_kd + wt * wt * sigma_ad + 2.0 * w * wt * sigma_cross).max(VAR_FLOOR)
}

/// One fused (step, axis) value with its sensitivities to the residual inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedScalar {
    pub mean: f64,
    pub var: f64,
    pub dmean_dmu_res: f64,
    pub dmean_dsigma_res: f64,
    pub dvar_dsigma_res: f64,
    /// The weight formula degenerated and the KD value was returned.
    pub degenerate: bool,
}

/// Fuses `mu_kd` with `mu_kd + mu_res`. For the VI modes `mu_res` is the
/// difference between the independent prediction and the KD mean.
pub fn fuse_scalar(
    cfg: &FusionConfig,
    mu_kd: f64,
    sigma_kd: f64,
    mu_res: f64,
    sigma_res: f64,
) -> FusedScalar {
    let (sigma_kd, sigma_cross) = match cfg.mode {
        FusionMode::SimpleAdd => {
            return FusedScalar {
                mean: mu_kd + mu_res,
                var: sigma_res.max(VAR_FLOOR),
                dmean_dmu_res: 1.0,
                dmean_dsigma_res: 0.0,
                dvar_dsigma_res: if sigma_res > VAR_FLOOR { 1.0 } else { 0.0 },
                degenerate: false,
            }
        }
        FusionMode::Ivw => (sigma_kd, cfg.sigma_cross),
        FusionMode::ViIndependent => (sigma_kd, 0.0),
        FusionMode::ViFixed => (cfg.vi_fixed_sigma_kd, 0.0),
    };
    let Ok((w, wt)) = ivw_weights(sigma_kd, sigma_res, sigma_cross) else {
        return FusedScalar {
            mean: mu_kd,
            var: sigma_kd.max(VAR_FLOOR),
            dmean_dmu_res: 0.0,
            dmean_dsigma_res: 0.0,
            dvar_dsigma_res: 0.0,
            degenerate: true,
        };
    };
    let den = sigma_res + sigma_kd - 2.0 * sigma_cross;
    let raw_wt = (sigma_kd - sigma_cross) / den;
    // zero inside the clamped regions
    let dwt = if (0.0..=1.0).contains(&raw_wt) {
        -(sigma_kd - sigma_cross) / (den * den)
    } else {
        0.0
    };
    let dw = -dwt;
    let var_raw = w * w * sigma_kd + wt * wt * sigma_res + 2.0 * w * wt * sigma_cross;
    let dvar = if var_raw > VAR_FLOOR {
        2.0 * w * dw * sigma_kd
            + 2.0 * wt * dwt * sigma_res
            + wt * wt
            + 2.0 * sigma_cross * (dw * wt + w * dwt)
    } else {
        0.0
    };
    FusedScalar {
        mean: mu_kd + wt * mu_res,
        var: var_raw.max(VAR_FLOOR),
        dmean_dmu_res: wt,
        dmean_dsigma_res: dwt * mu_res,
        dvar_dsigma_res: dvar,
        degenerate: false,
    }
}

/// Fuses two trajectories given in the same frame. Returns the merged
/// trajectory and the number of degenerate (step, axis) fallbacks.
pub fn fuse(
    y_kd: &GaussianTrajectory,
    y_res: &GaussianTrajectory,
    cfg: &FusionConfig,
) -> Result<(GaussianTrajectory, usize)> {
    if y_kd.len() != y_res.len() {
        return Err(Error::Dimension {
            context: "fusion horizon",
            expected: y_kd.len(),
            actual: y_res.len(),
        });
    }
    let mut degenerate = 0;
    let mut means = Vec::with_capacity(y_kd.len());
    let mut variances = Vec::with_capacity(y_kd.len());
    for j in 0..y_kd.len() {
        let (mk, vk, mr, vr) = (y_kd.means[j], y_kd.variances[j], y_res.means[j], y_res.variances[j]);
        let fx = fuse_scalar(cfg, mk.x, vk.x, mr.x, vr.x);
        let fy = fuse_scalar(cfg, mk.y, vk.y, mr.y, vr.y);
        degenerate += fx.degenerate as usize + fy.degenerate as usize;
        means.push(Vec2::new(fx.mean, fy.mean));
        variances.push(Vec2::new(fx.var, fy.var));
    }
    Ok((GaussianTrajectory { means, variances }, degenerate))
}

/// Residual form of an independent full-trajectory prediction, for the VI modes.
pub fn as_residual(y_kd: &GaussianTrajectory, independent: &GaussianTrajectory) -> GaussianTrajectory {
    GaussianTrajectory {
        means: y_kd
            .means
            .iter()
            .zip(&independent.means)
            .map(|(k, i)| *i - *k)
            .collect(),
        variances: independent.variances.clone(),
    }
}
