//! Inference over datasets: per-pixel forward passes assembled into
//! parameter maps.

use super::blocks::forward_pixel;
use super::weights::MFliNetWeights;
use crate::error::{Error, Result};
use crate::sim::{make_irf, FliDataset};
use crate::tensor::Tape;
use rayon::prelude::*;

/// Predicted parameter maps over all pixels (background pixels zero).
/// Values are clamped to physical ranges at map-assembly time; the raw
/// head outputs are what training sees.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub tau1: Vec<f64>,
    pub tau2: Vec<f64>,
    pub a_r: Vec<f64>,
    /// Foreground pixel count evaluated.
    pub pixels: usize,
    /// Forward-pass wall time in seconds (measurement, not part of any
    /// determinism contract).
    pub wall_s: f64,
}

impl Prediction {
    pub fn tau_m(&self, pixel: usize) -> f64 {
        self.a_r[pixel] * self.tau1[pixel] + (1.0 - self.a_r[pixel]) * self.tau2[pixel]
    }
}

pub fn peak_normalize(h: &[f64]) -> Vec<f64> {
    let peak = h.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        h.iter().map(|v| v / peak).collect()
    } else {
        h.to_vec()
    }
}

/// Raw three-head output for one pixel (no clamping).
pub fn predict_pixel_raw(
    weights: &MFliNetWeights,
    tpsf_norm: &[f64],
    irf_norm: &[f64],
) -> Result<[f64; 3]> {
    let mut tape = Tape::new();
    let bound = weights.bind(&mut tape);
    let ids = forward_pixel(&mut tape, &bound, tpsf_norm, irf_norm)?;
    Ok(ids.map(|id| tape.value_scalar(id)))
}

/// Run the model over every foreground pixel of a dataset.
///
/// `ablate_irf` replaces each pixel's instrument response with the
/// dataset's zero-delay reference response.
pub fn predict_dataset(
    weights: &MFliNetWeights,
    ds: &FliDataset,
    ablate_irf: bool,
    parallelism: usize,
) -> Result<Prediction> {
    if ds.gates != weights.cfg.gates {
        return Err(Error::Dimension(format!(
            "dataset has {} gates, model expects {}",
            ds.gates, weights.cfg.gates
        )));
    }
    let reference_irf = if ablate_irf {
        let irf = make_irf(&ds.meta.sim.irf_model(0.0), ds.axis())?;
        Some(peak_normalize(&irf.counts))
    } else {
        None
    };

    let fg = ds.foreground_pixels();
    let start = std::time::Instant::now();
    let eval = |&p: &usize| -> Result<(usize, [f64; 3])> {
        let g = ds.gates;
        let tpsf = peak_normalize(&ds.tpsf[p * g..(p + 1) * g]);
        let irf = match &reference_irf {
            Some(r) => r.clone(),
            None => peak_normalize(&ds.irf[p * g..(p + 1) * g]),
        };
        Ok((p, predict_pixel_raw(weights, &tpsf, &irf)?))
    };
    let results: Vec<Result<(usize, [f64; 3])>> = if parallelism == 1 {
        fg.iter().map(eval).collect()
    } else {
        fg.par_iter().map(eval).collect()
    };
    let wall_s = start.elapsed().as_secs_f64();

    let n = ds.n_pixels();
    let mut pred = Prediction {
        tau1: vec![0.0; n],
        tau2: vec![0.0; n],
        a_r: vec![0.0; n],
        pixels: fg.len(),
        wall_s,
    };
    for r in results {
        let (p, [t1, t2, ar]) = r?;
        // reporting-time clamp to physical ranges
        pred.tau1[p] = t1.max(1e-6);
        pred.tau2[p] = t2.max(1e-6);
        pred.a_r[p] = ar.clamp(0.0, 1.0);
    }
    Ok(pred)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttentionKind, ModelConfig};
    use crate::sim::{generate_dataset, SimConfig};

    fn toy() -> (MFliNetWeights, FliDataset) {
        let cfg = ModelConfig {
            d_model: 8,
            heads: 2,
            gates: 16,
            image_side: 6,
            attention: AttentionKind::Differential,
            seed: 7,
            ..ModelConfig::default()
        };
        let weights = MFliNetWeights::init(&cfg).unwrap();
        let sim = SimConfig {
            samples: 1,
            image_side: 6,
            gates: 16,
            irf_lead_ps: 200.0,
            ..SimConfig::default()
        };
        let ds = generate_dataset(&sim, 13).unwrap();
        (weights, ds)
    }

    #[test]
    fn identical_pixels_get_identical_predictions() {
        let (w, mut ds) = toy();
        let fg = ds.foreground_pixels();
        let (a, b) = (fg[0], fg[1]);
        let g = ds.gates;
        let tpsf_a = ds.tpsf[a * g..(a + 1) * g].to_vec();
        let irf_a = ds.irf[a * g..(a + 1) * g].to_vec();
        ds.tpsf[b * g..(b + 1) * g].copy_from_slice(&tpsf_a);
        ds.irf[b * g..(b + 1) * g].copy_from_slice(&irf_a);
        let pred = predict_dataset(&w, &ds, false, 1).unwrap();
        assert_eq!(pred.tau1[a], pred.tau1[b]);
        assert_eq!(pred.tau2[a], pred.tau2[b]);
        assert_eq!(pred.a_r[a], pred.a_r[b]);
    }

    #[test]
    fn pixel_permutation_consistency() {
        // predictions depend only on each pixel's own histograms, so
        // permuting pixels permutes outputs
        let (w, ds) = toy();
        let pred = predict_dataset(&w, &ds, false, 1).unwrap();
        let fg = ds.foreground_pixels();
        let (a, b) = (fg[0], fg[1]);
        let g = ds.gates;
        let mut swapped = ds.clone();
        for i in 0..g {
            swapped.tpsf.swap(a * g + i, b * g + i);
            swapped.irf.swap(a * g + i, b * g + i);
        }
        let pred2 = predict_dataset(&w, &swapped, false, 1).unwrap();
        assert_eq!(pred.tau1[a], pred2.tau1[b]);
        assert_eq!(pred.tau1[b], pred2.tau1[a]);
    }

    #[test]
    fn scale_invariance_of_input_normalization() {
        let (w, ds) = toy();
        let fg = ds.foreground_pixels();
        let p = fg[0];
        let g = ds.gates;
        let tpsf = peak_normalize(&ds.tpsf[p * g..(p + 1) * g]);
        let irf = peak_normalize(&ds.irf[p * g..(p + 1) * g]);
        let scaled: Vec<f64> = ds.tpsf[p * g..(p + 1) * g].iter().map(|v| v * 37.5).collect();
        let tpsf_scaled = peak_normalize(&scaled);
        let a = predict_pixel_raw(&w, &tpsf, &irf).unwrap();
        let b = predict_pixel_raw(&w, &tpsf_scaled, &irf).unwrap();
        for i in 0..3 {
            assert!((a[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_mismatch_is_dimension_error() {
        let (w, _) = toy();
        let sim = SimConfig {
            samples: 1,
            image_side: 6,
            gates: 24,
            ..SimConfig::default()
        };
        let ds = generate_dataset(&sim, 13).unwrap();
        assert!(matches!(
            predict_dataset(&w, &ds, false, 1),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn parallel_matches_sequential() {
        let (w, ds) = toy();
        let a = predict_dataset(&w, &ds, false, 1).unwrap();
        let b = predict_dataset(&w, &ds, false, 0).unwrap();
        assert_eq!(a.tau1, b.tau1);
        assert_eq!(a.tau2, b.tau2);
        assert_eq!(a.a_r, b.a_r);
    }
}
