//! Classical lifetime estimators: nonlinear least-squares fitting of the
//! convolution model (with optional arrival-offset correction) and the
//! centroid-difference estimate.

pub mod cmm;
pub mod image;
pub mod lm;

pub use cmm::cmm_estimate;
pub use image::{fit_image, FitImage, FitOutcome, RegionStat};
pub use lm::lm_fit;

use crate::error::{Error, Result};
use crate::sim::{biexp_decay, convolve, LifetimeParams, TimeHistogram};
use serde::{Deserialize, Serialize};

/// Amplitude-weighted mean lifetime in ns.
pub fn mean_lifetime(p: &LifetimeParams) -> f64 {
    p.a_r * p.tau1_ns + (1.0 - p.a_r) * p.tau2_ns
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayKind {
    Mono,
    Bi,
}

/// Physical fit parameters. For a mono-exponential model `tau2 == tau1`
/// and `a_r == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitParams {
    pub amplitude: f64,
    pub tau1_ns: f64,
    pub tau2_ns: f64,
    pub a_r: f64,
    pub t0_ps: f64,
    pub baseline: f64,
}

impl FitParams {
    pub fn tau_m(&self) -> f64 {
        self.a_r * self.tau1_ns + (1.0 - self.a_r) * self.tau2_ns
    }
}

/// Per-parameter box bounds (finite, lo < hi). The split between the tau1
/// and tau2 boxes keeps the component ordering fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitBounds {
    pub amplitude: (f64, f64),
    pub tau1_ns: (f64, f64),
    pub tau2_ns: (f64, f64),
    pub a_r: (f64, f64),
    pub t0_ps: (f64, f64),
    pub baseline: (f64, f64),
}

impl Default for FitBounds {
    fn default() -> Self {
        FitBounds {
            amplitude: (1e-6, 1e9),
            tau1_ns: (0.01, 0.8),
            tau2_ns: (0.8, 10.0),
            a_r: (0.0, 1.0),
            t0_ps: (-400.0, 400.0),
            baseline: (0.0, 1e9),
        }
    }
}

impl FitBounds {
    fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("amplitude", self.amplitude),
            ("tau1_ns", self.tau1_ns),
            ("tau2_ns", self.tau2_ns),
            ("a_r", self.a_r),
            ("t0_ps", self.t0_ps),
            ("baseline", self.baseline),
        ] {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::config(
                    format!("fit.bounds.{name}"),
                    format!("bounds must be finite with lo < hi, got ({lo}, {hi})"),
                ));
            }
        }
        Ok(())
    }
}

/// Starting point; fields left `None` use the built-in heuristics
/// (amplitude from the peak, baseline from the tail mean of the last
/// five gates).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialGuess {
    pub tau1_ns: Option<f64>,
    pub tau2_ns: Option<f64>,
    pub a_r: Option<f64>,
    pub t0_ps: Option<f64>,
    pub amplitude: Option<f64>,
    pub baseline: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitModelSpec {
    pub kind: DecayKind,
    pub fit_offset: bool,
    pub bounds: FitBounds,
    pub initial: InitialGuess,
    pub max_iterations: usize,
}

impl Default for FitModelSpec {
    fn default() -> Self {
        FitModelSpec {
            kind: DecayKind::Bi,
            fit_offset: true,
            bounds: FitBounds::default(),
            initial: InitialGuess::default(),
            max_iterations: 200,
        }
    }
}

impl FitModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if self.max_iterations == 0 {
            return Err(Error::config("fit.max_iterations", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: FitParams,
    /// L2 norm of the residual vector at the solution.
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Diagonal of the parameter covariance estimate from the normal
    /// equations at the solution, in physical units, per free parameter.
    pub covariance_diag: Vec<f64>,
}

impl FitResult {
    pub fn tau_m(&self) -> f64 {
        self.params.tau_m()
    }
}

/// Shift a histogram by `shift_ps` (positive delays it) with linear
/// interpolation between gates; samples outside the support are zero.
pub fn shift_linear(counts: &[f64], dt_ps: f64, shift_ps: f64) -> Vec<f64> {
    let f = shift_ps / dt_ps;
    let n = counts.len();
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let pos = i as f64 - f;
        let k = pos.floor();
        let frac = pos - k;
        let k = k as i64;
        let lo = if k >= 0 && (k as usize) < n {
            counts[k as usize]
        } else {
            0.0
        };
        let hi = if k + 1 >= 0 && ((k + 1) as usize) < n {
            counts[(k + 1) as usize]
        } else {
            0.0
        };
        *o = lo * (1.0 - frac) + hi * frac;
    }
    out
}

/// Fit forward model: amplitude * [shift(irf, t0) ∗ decay] + baseline,
/// with the convolution peak-normalized like the simulator's.
pub fn forward_fit_model(
    params: &FitParams,
    kind: DecayKind,
    irf: &TimeHistogram,
) -> Result<TimeHistogram> {
    let axis = irf.axis;
    let shifted = TimeHistogram {
        counts: shift_linear(&irf.counts, axis.dt_ps, params.t0_ps),
        axis,
        clipped: irf.clipped,
    };
    let lifetime = match kind {
        DecayKind::Mono => LifetimeParams {
            tau1_ns: params.tau1_ns,
            tau2_ns: params.tau1_ns,
            a_r: 1.0,
        },
        DecayKind::Bi => LifetimeParams {
            tau1_ns: params.tau1_ns,
            tau2_ns: params.tau2_ns,
            a_r: params.a_r,
        },
    };
    let decay = biexp_decay(&lifetime, axis);
    let mut model = convolve(&shifted, &decay)?;
    for c in &mut model.counts {
        *c = params.amplitude * *c + params.baseline;
    }
    Ok(model)
}
