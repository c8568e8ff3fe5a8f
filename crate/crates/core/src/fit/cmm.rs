//! Center-of-mass lifetime: the difference between the count-weighted
//! mean arrival times of the TPSF and the IRF, in nanoseconds.

use crate::error::Result;
use crate::sim::TimeHistogram;

pub fn cmm_estimate(tpsf: &TimeHistogram, irf: &TimeHistogram) -> Result<f64> {
    let t = tpsf.centroid_ps()?;
    let i = irf.centroid_ps()?;
    Ok((t - i) / 1000.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::sim::{biexp_decay, convolve, make_irf, IrfModel, LifetimeParams, TimeAxis, TimeHistogram};

    #[test]
    fn identical_histograms_give_zero() {
        let axis = TimeAxis::new(64, 40.0);
        let h = make_irf(&IrfModel::default(), axis).unwrap();
        assert_eq!(cmm_estimate(&h, &h).unwrap(), 0.0);
    }

    #[test]
    fn zero_counts_is_undefined_input() {
        let axis = TimeAxis::new(8, 40.0);
        let z = TimeHistogram::new(vec![0.0; 8], axis).unwrap();
        assert!(matches!(
            cmm_estimate(&z, &z),
            Err(Error::UndefinedInput(_))
        ));
    }

    #[test]
    fn mono_exponential_matches_discrete_truncated_mean() {
        // delta IRF at bin 0, so tpsf == decay; the discrete truncated mean
        // of a sampled exponential has the closed geometric-series form
        let g = 176usize;
        let dt = 40.0;
        let axis = TimeAxis::new(g, dt);
        let tau_ns = 1.0;
        let p = LifetimeParams::new(tau_ns, tau_ns, 1.0).unwrap();
        let mut delta = vec![0.0; g];
        delta[0] = 1.0;
        let irf = TimeHistogram::new(delta, axis).unwrap();
        let tpsf = convolve(&irf, &biexp_decay(&p, axis)).unwrap();

        let got = cmm_estimate(&tpsf, &irf).unwrap();

        // analytic: sum k x^k / sum x^k over k in [0, g), x = exp(-dt/tau)
        let x = (-dt / (tau_ns * 1000.0)).exp();
        let n = g as f64;
        let sum_xk = (1.0 - x.powf(n)) / (1.0 - x);
        let sum_kxk =
            x * (1.0 - n * x.powf(n - 1.0) + (n - 1.0) * x.powf(n)) / ((1.0 - x) * (1.0 - x));
        let expected_ns = (sum_kxk / sum_xk) * dt / 1000.0;

        assert!(
            (got - expected_ns).abs() < 1e-6,
            "got {got}, analytic {expected_ns}"
        );
        // and the truncation bias keeps it below the true lifetime
        assert!(got < tau_ns);
    }

    #[test]
    fn shared_shift_cancels() {
        let axis = TimeAxis::new(176, 40.0);
        let p = LifetimeParams::new(0.5, 1.2, 0.3).unwrap();
        let decay = biexp_decay(&p, axis);
        let base = IrfModel::default();
        let i0 = make_irf(&base, axis).unwrap();
        let i3 = make_irf(&IrfModel { delay_ps: -120.0, ..base }, axis).unwrap();
        let t0 = convolve(&i0, &decay).unwrap();
        let t3 = convolve(&i3, &decay).unwrap();
        let a = cmm_estimate(&t0, &i0).unwrap();
        let b = cmm_estimate(&t3, &i3).unwrap();
        // truncation nibbles the shifted tail, so allow a small drift
        assert!((a - b).abs() < 5e-3, "{a} vs {b}");
    }

    #[test]
    fn invariant_under_count_scaling() {
        let axis = TimeAxis::new(96, 40.0);
        let p = LifetimeParams::new(0.5, 1.2, 0.3).unwrap();
        let irf = make_irf(&IrfModel::default(), axis).unwrap();
        let tpsf = convolve(&irf, &biexp_decay(&p, axis)).unwrap();
        let mut scaled = tpsf.clone();
        for c in &mut scaled.counts {
            *c *= 731.5;
        }
        let a = cmm_estimate(&tpsf, &irf).unwrap();
        let b = cmm_estimate(&scaled, &irf).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
