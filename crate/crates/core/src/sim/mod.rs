//! Synthetic time-resolved fluorescence data.
//!
//! The forward model: a bi-exponential decay sampled on a gated time axis,
//! convolved with a per-pixel instrument response (Gaussian pulse integrated
//! over a rectangular gate, positioned by a per-pixel arrival delay), scaled
//! to a photon budget and degraded with shot, read-out and dark noise.

pub mod dataset;
pub mod idx;
pub mod io;
pub mod phantom;

pub use dataset::{generate_dataset, FliDataset, MaskSource, SimConfig, Truth};
pub use phantom::{make_phantom, PhantomScene, Region};

use crate::error::{Error, Result};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Uniform gated time axis (picoseconds).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeAxis {
    pub len: usize,
    pub dt_ps: f64,
    pub t0_ps: f64,
}

impl TimeAxis {
    pub fn new(len: usize, dt_ps: f64) -> Self {
        TimeAxis {
            len,
            dt_ps,
            t0_ps: 0.0,
        }
    }

    pub fn time_at(&self, k: usize) -> f64 {
        self.t0_ps + k as f64 * self.dt_ps
    }
}

/// Photon counts per gate on a time axis. `clipped` flags a pulse whose
/// mass was substantially truncated by the axis.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeHistogram {
    pub counts: Vec<f64>,
    pub axis: TimeAxis,
    pub clipped: bool,
}

impl TimeHistogram {
    pub fn new(counts: Vec<f64>, axis: TimeAxis) -> Result<Self> {
        if counts.len() != axis.len {
            return Err(Error::Dimension(format!(
                "histogram has {} gates, axis expects {}",
                counts.len(),
                axis.len
            )));
        }
        if counts.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::Contract(
                "histogram counts must be finite and nonnegative".into(),
            ));
        }
        Ok(TimeHistogram {
            counts,
            axis,
            clipped: false,
        })
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn peak(&self) -> f64 {
        self.counts.iter().cloned().fold(0.0, f64::max)
    }

    pub fn peak_index(&self) -> usize {
        let mut best = 0;
        for (i, &c) in self.counts.iter().enumerate() {
            if c > self.counts[best] {
                best = i;
            }
        }
        best
    }

    /// Count-weighted mean arrival time in ps.
    pub fn centroid_ps(&self) -> Result<f64> {
        let total = self.total();
        if total <= 0.0 {
            return Err(Error::UndefinedInput(
                "centroid of a histogram with zero total counts".into(),
            ));
        }
        let mut s = 0.0;
        for (k, &c) in self.counts.iter().enumerate() {
            s += self.axis.time_at(k) * c;
        }
        Ok(s / total)
    }

    /// Scale so the maximum count is 1. A zero histogram stays zero.
    pub fn peak_normalized(&self) -> TimeHistogram {
        let peak = self.peak();
        let mut out = self.clone();
        if peak > 0.0 {
            for c in &mut out.counts {
                *c /= peak;
            }
        }
        out
    }
}

/// Bi-exponential lifetime parameters (nanoseconds, unitless fraction).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifetimeParams {
    pub tau1_ns: f64,
    pub tau2_ns: f64,
    pub a_r: f64,
}

impl LifetimeParams {
    pub fn new(tau1_ns: f64, tau2_ns: f64, a_r: f64) -> Result<Self> {
        if !(tau1_ns > 0.0 && tau2_ns >= tau1_ns) {
            return Err(Error::Contract(format!(
                "lifetimes must satisfy 0 < tau1 <= tau2, got {tau1_ns} and {tau2_ns}"
            )));
        }
        if !(0.0..=1.0).contains(&a_r) {
            return Err(Error::Contract(format!(
                "a_r must lie in [0, 1], got {a_r}"
            )));
        }
        Ok(LifetimeParams {
            tau1_ns,
            tau2_ns,
            a_r,
        })
    }
}

/// Instrument response model: Gaussian pulse of the given FWHM integrated
/// over a rectangular gate, positioned at `lead_ps + delay_ps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrfModel {
    pub fwhm_ps: f64,
    pub gate_width_ps: f64,
    /// Fixed instrument lead time that places the zero-delay pulse inside
    /// the axis.
    pub lead_ps: f64,
    /// Per-pixel signed arrival shift on top of the lead; raised sample
    /// surfaces shorten the optical path, giving negative values.
    pub delay_ps: f64,
}

impl Default for IrfModel {
    fn default() -> Self {
        IrfModel {
            fwhm_ps: 150.0,
            gate_width_ps: 300.0,
            lead_ps: 600.0,
            delay_ps: 0.0,
        }
    }
}

impl IrfModel {
    pub fn validate(&self) -> Result<()> {
        if self.fwhm_ps <= 0.0 {
            return Err(Error::config("irf.fwhm_ps", "must be > 0"));
        }
        if self.gate_width_ps <= 0.0 {
            return Err(Error::config("irf.gate_width_ps", "must be > 0"));
        }
        Ok(())
    }
}

/// Sampled bi-exponential decay, peak value 1 at t = 0.
pub fn biexp_decay(p: &LifetimeParams, axis: TimeAxis) -> TimeHistogram {
    let mut counts = Vec::with_capacity(axis.len);
    for k in 0..axis.len {
        let t_ns = axis.time_at(k) / 1000.0;
        counts.push(p.a_r * (-t_ns / p.tau1_ns).exp() + (1.0 - p.a_r) * (-t_ns / p.tau2_ns).exp());
    }
    TimeHistogram {
        counts,
        axis,
        clipped: false,
    }
}

fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Gaussian-through-gate instrument response, peak-normalized. Flags the
/// histogram when more than 25% of the pulse mass falls outside the axis.
pub fn make_irf(m: &IrfModel, axis: TimeAxis) -> Result<TimeHistogram> {
    m.validate()?;
    let sigma = m.fwhm_ps / 2.355;
    let center = m.lead_ps + m.delay_ps;
    let half_gate = m.gate_width_ps / 2.0;
    let mut counts = Vec::with_capacity(axis.len);
    let mut mass = 0.0;
    for k in 0..axis.len {
        let t = axis.time_at(k);
        let v = gauss_cdf((t - center + half_gate) / sigma) - gauss_cdf((t - center - half_gate) / sigma);
        mass += v * axis.dt_ps;
        counts.push(v);
    }
    // the continuous pulse integrates to exactly the gate width
    let fraction_outside = 1.0 - (mass / m.gate_width_ps).clamp(0.0, 1.0);
    let clipped = fraction_outside > 0.25;
    let peak = counts.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        for c in &mut counts {
            *c /= peak;
        }
    }
    Ok(TimeHistogram {
        counts,
        axis,
        clipped,
    })
}

/// Causal discrete convolution truncated to the axis, then peak-normalized:
/// out[n] = sum_{k<=n} irf[k] * decay[n-k] * dt.
pub fn convolve(irf: &TimeHistogram, decay: &TimeHistogram) -> Result<TimeHistogram> {
    if irf.axis != decay.axis {
        return Err(Error::Dimension(format!(
            "convolve axes disagree: {:?} vs {:?}",
            irf.axis, decay.axis
        )));
    }
    let n = irf.len();
    let dt = irf.axis.dt_ps;
    let mut out = vec![0.0; n];
    for (k, &ik) in irf.counts.iter().enumerate() {
        if ik == 0.0 {
            continue;
        }
        let scaled = ik * dt;
        for j in 0..n - k {
            out[k + j] += scaled * decay.counts[j];
        }
    }
    let peak = out.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        for c in &mut out {
            *c /= peak;
        }
    }
    Ok(TimeHistogram {
        counts: out,
        axis: irf.axis,
        clipped: irf.clipped,
    })
}

/// Detector noise model applied to a shape scaled to a photon budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseParams {
    pub read_sigma: f64,
    pub dark_offset: f64,
    pub enabled: bool,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            read_sigma: 2.0,
            dark_offset: 1.0,
            enabled: true,
        }
    }
}

/// Scale to `peak_counts`, apply Poisson shot noise per gate, add Gaussian
/// read noise and a constant dark offset, clamp at zero.
pub fn add_noise(
    h: &TimeHistogram,
    peak_counts: f64,
    noise: &NoiseParams,
    rng: &mut ChaCha8Rng,
) -> TimeHistogram {
    let peak = h.peak();
    let scale = if peak > 0.0 { peak_counts / peak } else { 0.0 };
    let mut out = h.clone();
    for c in &mut out.counts {
        let expected = *c * scale;
        let mut v = crate::rng::poisson(rng, expected);
        if noise.enabled {
            v += crate::rng::normal(rng, noise.read_sigma) + noise.dark_offset;
        }
        *c = v.max(0.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamKind};

    fn axis(n: usize) -> TimeAxis {
        TimeAxis::new(n, 40.0)
    }

    #[test]
    fn biexp_bounds_are_mono_exponential() {
        let ax = axis(64);
        let p1 = LifetimeParams::new(0.5, 1.0, 1.0).unwrap();
        let h1 = biexp_decay(&p1, ax);
        for k in 0..64 {
            let t_ns = ax.time_at(k) / 1000.0;
            assert!((h1.counts[k] - (-t_ns / 0.5).exp()).abs() < 1e-15);
        }
        let p0 = LifetimeParams::new(0.5, 1.0, 0.0).unwrap();
        let h0 = biexp_decay(&p0, ax);
        for k in 0..64 {
            let t_ns = ax.time_at(k) / 1000.0;
            assert!((h0.counts[k] - (-t_ns / 1.0).exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn biexp_direct_evaluation_at_one_ns() {
        // tau1=0.5, tau2=1.0, a_r=0.5 at t=1ns: 0.5 e^-2 + 0.5 e^-1
        let ax = axis(64);
        let p = LifetimeParams::new(0.5, 1.0, 0.5).unwrap();
        let h = biexp_decay(&p, ax);
        let k = 25; // 25 * 40ps = 1000ps
        let expected = 0.5 * (-2.0f64).exp() + 0.5 * (-1.0f64).exp();
        assert!((h.counts[k] - expected).abs() < 1e-12);
        assert!((expected - 0.2516073622040275).abs() < 1e-12);
        assert!((h.counts[0] - 1.0).abs() < 1e-15, "peak 1 at t=0");
    }

    #[test]
    fn irf_integer_delays_are_exact_translations() {
        let ax = axis(176);
        let base = IrfModel::default();
        let h0 = make_irf(&base, ax).unwrap();
        let h3 = make_irf(
            &IrfModel {
                delay_ps: 3.0 * 40.0,
                ..base
            },
            ax,
        )
        .unwrap();
        for k in 3..176 {
            assert_eq!(h3.counts[k], h0.counts[k - 3], "bin {k}");
        }
    }

    #[test]
    fn irf_limits_to_single_bin_delta() {
        let ax = axis(64);
        let m = IrfModel {
            fwhm_ps: 1e-3,
            gate_width_ps: 40.0,
            lead_ps: 600.0,
            delay_ps: 0.0,
        };
        let h = make_irf(&m, ax).unwrap();
        let hot: Vec<usize> = (0..64).filter(|&k| h.counts[k] > 1e-9).collect();
        assert_eq!(hot, vec![15], "only the bin at 600ps fires");
        assert!((h.counts[15] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn irf_centroid_tracks_delay() {
        let ax = axis(176);
        let c0 = make_irf(&IrfModel::default(), ax).unwrap().centroid_ps().unwrap();
        let c160 = make_irf(
            &IrfModel {
                delay_ps: 160.0,
                ..IrfModel::default()
            },
            ax,
        )
        .unwrap()
        .centroid_ps()
        .unwrap();
        assert!((c160 - c0 - 160.0).abs() <= 20.0, "got {}", c160 - c0);
    }

    #[test]
    fn irf_clipping_warning() {
        let ax = axis(32); // 1280ps window
        let ok = make_irf(&IrfModel::default(), ax).unwrap();
        assert!(!ok.clipped);
        let pushed = make_irf(
            &IrfModel {
                delay_ps: 900.0,
                ..IrfModel::default()
            },
            ax,
        )
        .unwrap();
        assert!(pushed.clipped, "most of the pulse is past the axis end");
    }

    #[test]
    fn convolve_with_delta_is_identity_and_shift() {
        let ax = axis(64);
        let p = LifetimeParams::new(0.4, 1.1, 0.4).unwrap();
        let decay = biexp_decay(&p, ax);

        let mut delta0 = vec![0.0; 64];
        delta0[0] = 1.0;
        let irf0 = TimeHistogram::new(delta0, ax).unwrap();
        let out = convolve(&irf0, &decay).unwrap();
        for k in 0..64 {
            assert!((out.counts[k] - decay.counts[k]).abs() < 1e-12);
        }

        let mut delta5 = vec![0.0; 64];
        delta5[5] = 1.0;
        let irf5 = TimeHistogram::new(delta5, ax).unwrap();
        let shifted = convolve(&irf5, &decay).unwrap();
        for k in 5..64 {
            assert!((shifted.counts[k] - decay.counts[k - 5]).abs() < 1e-12);
        }
        for k in 0..5 {
            assert_eq!(shifted.counts[k], 0.0);
        }
    }

    #[test]
    fn convolve_matches_naive_double_loop() {
        let ax = axis(48);
        let mut rng = stream(1, StreamKind::Check, 0, 0);
        let a: Vec<f64> = (0..48).map(|_| crate::rng::uniform(&mut rng, 0.0, 1.0)).collect();
        let b: Vec<f64> = (0..48).map(|_| crate::rng::uniform(&mut rng, 0.0, 1.0)).collect();
        let ha = TimeHistogram::new(a.clone(), ax).unwrap();
        let hb = TimeHistogram::new(b.clone(), ax).unwrap();
        let got = convolve(&ha, &hb).unwrap();

        let mut want = vec![0.0; 48];
        for n in 0..48 {
            for k in 0..=n {
                want[n] += a[k] * b[n - k] * 40.0;
            }
        }
        let peak = want.iter().cloned().fold(0.0, f64::max);
        for w in &mut want {
            *w /= peak;
        }
        for k in 0..48 {
            assert!((got.counts[k] - want[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn convolve_axis_mismatch_errors() {
        let a = TimeHistogram::new(vec![1.0; 8], axis(8)).unwrap();
        let b = TimeHistogram::new(vec![1.0; 8], TimeAxis::new(8, 50.0)).unwrap();
        assert!(matches!(convolve(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn noise_is_deterministic_per_stream() {
        let ax = axis(32);
        let p = LifetimeParams::new(0.5, 1.2, 0.3).unwrap();
        let h = biexp_decay(&p, ax);
        let noise = NoiseParams::default();
        let a = add_noise(&h, 500.0, &noise, &mut stream(9, StreamKind::PixelNoise, 0, 7));
        let b = add_noise(&h, 500.0, &noise, &mut stream(9, StreamKind::PixelNoise, 0, 7));
        assert_eq!(a.counts, b.counts);
    }

    #[test]
    fn noise_converges_to_shape_at_high_counts() {
        let ax = axis(64);
        let irf = make_irf(&IrfModel::default(), ax).unwrap();
        let p = LifetimeParams::new(0.5, 1.2, 0.3).unwrap();
        let clean = convolve(&irf, &biexp_decay(&p, ax)).unwrap();
        let noise = NoiseParams::default();
        let noisy = add_noise(
            &clean,
            1e6,
            &noise,
            &mut stream(11, StreamKind::PixelNoise, 0, 0),
        );
        let renorm = noisy.peak_normalized();
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..64 {
            num += (renorm.counts[k] - clean.counts[k]).powi(2);
            den += clean.counts[k].powi(2);
        }
        let rel_l2 = (num / den).sqrt();
        assert!(rel_l2 < 0.01, "relative L2 error {rel_l2}");
    }

    #[test]
    fn noise_on_zero_histogram_is_dark_plus_read() {
        let ax = axis(1);
        let zero = TimeHistogram::new(vec![0.0], ax).unwrap();
        let noise = NoiseParams::default();
        let mut sum = 0.0;
        let n = 10_000;
        for i in 0..n {
            let out = add_noise(
                &zero,
                100.0,
                &noise,
                &mut stream(13, StreamKind::PixelNoise, 1, i as u64),
            );
            sum += out.counts[0];
        }
        let mean = sum / n as f64;
        assert!(
            (mean - 1.0).abs() < 0.5,
            "mean {mean} should sit near the dark offset"
        );
    }

    #[test]
    fn tpsf_monotone_after_peak_for_mono_exponential() {
        let ax = axis(176);
        let irf = make_irf(&IrfModel::default(), ax).unwrap();
        let p = LifetimeParams::new(1.0, 1.0, 1.0).unwrap();
        let tpsf = convolve(&irf, &biexp_decay(&p, ax)).unwrap();
        let peak = tpsf.peak_index();
        for k in peak..175 {
            assert!(
                tpsf.counts[k + 1] <= tpsf.counts[k] + 1e-12,
                "nonmonotone at {k}"
            );
        }
        assert!(tpsf.counts.iter().all(|&c| c >= 0.0));
    }

    #[test]
    fn shift_consistency_integer_bins() {
        let ax = axis(96);
        let p = LifetimeParams::new(0.5, 1.2, 0.3).unwrap();
        let decay = biexp_decay(&p, ax);
        let base = IrfModel::default();
        let t0 = convolve(&make_irf(&base, ax).unwrap(), &decay).unwrap();
        let k_shift = 4usize;
        let t4 = convolve(
            &make_irf(
                &IrfModel {
                    delay_ps: k_shift as f64 * 40.0,
                    ..base
                },
                ax,
            )
            .unwrap(),
            &decay,
        )
        .unwrap();
        // tolerance reflects the analytic pulse's far tail entering from
        // the left edge; a delta-shaped response shifts exactly
        for k in k_shift..96 - k_shift {
            assert!(
                (t4.counts[k] - t0.counts[k - k_shift]).abs() < 1e-6,
                "bin {k}: {} vs {}",
                t4.counts[k],
                t0.counts[k - k_shift]
            );
        }
    }
}
