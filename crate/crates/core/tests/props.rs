//! Property tests over the numeric invariants.

use fli_core::fit::cmm_estimate;
use fli_core::model::infer::peak_normalize;
use fli_core::sim::io::{dataset_from_bytes, dataset_to_bytes};
use fli_core::sim::{biexp_decay, convolve, generate_dataset, make_irf, IrfModel, LifetimeParams, SimConfig, TimeAxis, TimeHistogram};
use fli_core::tensor::{Tape, Tensor};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Softmax rows sum to one and stay finite for inputs up to |x| = 1e4.
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-1e4f64..1e4, 3..40)) {
        let mut tape = Tape::new();
        let n = values.len();
        let x = tape.leaf(Tensor::new(vec![n], values).unwrap());
        let s = tape.softmax(x, 0).unwrap();
        let d = tape.data(s);
        prop_assert!(d.iter().all(|v| v.is_finite() && *v >= 0.0));
        let sum: f64 = d.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12, "sum = {sum}");
    }

    /// The centroid-difference lifetime ignores the overall count scale.
    #[test]
    fn cmm_scale_invariant(scale in 1e-3f64..1e6, tau1 in 0.2f64..0.8, frac in 0.0f64..1.0) {
        let axis = TimeAxis::new(96, 40.0);
        let p = LifetimeParams::new(tau1, 1.2, frac).unwrap();
        let irf = make_irf(&IrfModel::default(), axis).unwrap();
        let tpsf = convolve(&irf, &biexp_decay(&p, axis)).unwrap();
        let mut scaled = tpsf.clone();
        for c in &mut scaled.counts {
            *c *= scale;
        }
        let a = cmm_estimate(&tpsf, &irf).unwrap();
        let b = cmm_estimate(&scaled, &irf).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    /// Peak normalization absorbs any positive prescale (to f64 rounding).
    #[test]
    fn peak_normalization_scale_invariant(scale in 1e-6f64..1e6, seed in 0u64..1000) {
        let mut h = vec![0.0; 32];
        let mut s = seed;
        for v in &mut h {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v = (s >> 11) as f64 / (1u64 << 53) as f64;
        }
        let a = peak_normalize(&h);
        let scaled: Vec<f64> = h.iter().map(|v| v * scale).collect();
        let b = peak_normalize(&scaled);
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    /// Convolution output is nonnegative with a unit peak for any
    /// nonnegative inputs that overlap the axis.
    #[test]
    fn convolution_normalized_nonnegative(delay in -160.0f64..0.0, tau1 in 0.2f64..0.79, frac in 0.0f64..1.0) {
        let axis = TimeAxis::new(64, 40.0);
        let irf = make_irf(&IrfModel { delay_ps: delay, ..IrfModel::default() }, axis).unwrap();
        let p = LifetimeParams::new(tau1, 0.8 + (0.8 - tau1), frac).unwrap();
        let tpsf = convolve(&irf, &biexp_decay(&p, axis)).unwrap();
        prop_assert!(tpsf.counts.iter().all(|&c| c >= 0.0));
        prop_assert!((tpsf.peak() - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    /// Dataset files survive a read/write round trip bit for bit.
    #[test]
    fn dataset_round_trip(seed in 0u64..500) {
        let cfg = SimConfig {
            samples: 1,
            image_side: 8,
            gates: 16,
            irf_lead_ps: 200.0,
            ..SimConfig::default()
        };
        let ds = generate_dataset(&cfg, seed).unwrap();
        let bytes = dataset_to_bytes(&ds).unwrap();
        let back = dataset_from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
        let again = dataset_to_bytes(&back).unwrap();
        prop_assert_eq!(bytes, again);
    }
}

/// Zero histograms stay zero under normalization.
#[test]
fn zero_histogram_normalizes_to_zero() {
    let axis = TimeAxis::new(8, 40.0);
    let z = TimeHistogram::new(vec![0.0; 8], axis).unwrap();
    assert!(z.peak_normalized().counts.iter().all(|&c| c == 0.0));
}
