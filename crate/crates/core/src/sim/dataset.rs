//! Dataset generation: foreground scenes with per-pixel lifetimes, delays
//! and photon budgets, rendered to TPSF/IRF stacks with ground truth.

use super::{add_noise, biexp_decay, convolve, make_irf, IrfModel, LifetimeParams, NoiseParams, TimeAxis, TimeHistogram};
use crate::error::{Error, Result};
use crate::rng::{self, stream, StreamKind};
use crate::sim::phantom::Region;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Where foreground masks come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskSource {
    /// Procedural stroke scenes; self-contained stand-in for digit images.
    Strokes,
    /// Binary masks thresholded from an IDX-format image file.
    Idx { path: String, threshold: u8 },
}

impl Default for MaskSource {
    fn default() -> Self {
        MaskSource::Strokes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub samples: usize,
    pub image_side: usize,
    pub gates: usize,
    pub dt_ps: f64,
    pub tau1_range_ns: (f64, f64),
    pub tau2_range_ns: (f64, f64),
    pub a_r_range: (f64, f64),
    pub peak_counts_range: (f64, f64),
    pub delay_range_ps: (f64, f64),
    pub irf_fwhm_ps: f64,
    pub irf_gate_width_ps: f64,
    pub irf_lead_ps: f64,
    pub noise: NoiseParams,
    pub mask: MaskSource,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            samples: 8,
            image_side: 28,
            gates: 176,
            dt_ps: 40.0,
            tau1_range_ns: (0.2, 0.8),
            tau2_range_ns: (0.8, 1.5),
            a_r_range: (0.0, 1.0),
            peak_counts_range: (100.0, 2000.0),
            delay_range_ps: (-160.0, 0.0),
            irf_fwhm_ps: 150.0,
            irf_gate_width_ps: 300.0,
            irf_lead_ps: 400.0,
            noise: NoiseParams::default(),
            mask: MaskSource::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        fn range(field: &str, (lo, hi): (f64, f64)) -> Result<()> {
            if lo > hi {
                return Err(Error::config(
                    field,
                    format!("min {lo} is greater than max {hi}"),
                ));
            }
            if !lo.is_finite() || !hi.is_finite() {
                return Err(Error::config(field, "bounds must be finite"));
            }
            Ok(())
        }
        if self.samples == 0 {
            return Err(Error::config("simulate.samples", "must be >= 1"));
        }
        if self.image_side == 0 {
            return Err(Error::config("simulate.image_side", "must be >= 1"));
        }
        if self.gates < 2 {
            return Err(Error::config("simulate.gates", "must be >= 2"));
        }
        if self.dt_ps <= 0.0 {
            return Err(Error::config("simulate.dt_ps", "must be > 0"));
        }
        range("simulate.tau1_range_ns", self.tau1_range_ns)?;
        range("simulate.tau2_range_ns", self.tau2_range_ns)?;
        range("simulate.a_r_range", self.a_r_range)?;
        range("simulate.peak_counts_range", self.peak_counts_range)?;
        range("simulate.delay_range_ps", self.delay_range_ps)?;
        if self.tau1_range_ns.0 <= 0.0 {
            return Err(Error::config("simulate.tau1_range_ns", "must be > 0"));
        }
        if self.a_r_range.0 < 0.0 || self.a_r_range.1 > 1.0 {
            return Err(Error::config("simulate.a_r_range", "must lie within [0, 1]"));
        }
        if self.peak_counts_range.0 <= 0.0 {
            return Err(Error::config("simulate.peak_counts_range", "must be > 0"));
        }
        self.irf_model(0.0).validate()?;
        Ok(())
    }

    pub fn axis(&self) -> TimeAxis {
        TimeAxis::new(self.gates, self.dt_ps)
    }

    pub fn irf_model(&self, delay_ps: f64) -> IrfModel {
        IrfModel {
            fwhm_ps: self.irf_fwhm_ps,
            gate_width_ps: self.irf_gate_width_ps,
            lead_ps: self.irf_lead_ps,
            delay_ps,
        }
    }

    pub fn pixels_per_sample(&self) -> usize {
        self.image_side * self.image_side
    }

    pub fn total_pixels(&self) -> usize {
        self.samples * self.pixels_per_sample()
    }
}

/// Ground-truth parameter maps, one value per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub tau1: Vec<f64>,
    pub tau2: Vec<f64>,
    pub a_r: Vec<f64>,
}

/// Stack of per-pixel TPSFs and IRFs with ground truth and mask.
/// Layout: pixel index p = sample * side * side + y * side + x; histograms
/// are contiguous runs of `gates` values at p * gates.
#[derive(Debug, Clone, PartialEq)]
pub struct FliDataset {
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    pub gates: usize,
    pub dt_ps: f64,
    pub tpsf: Vec<f64>,
    pub irf: Vec<f64>,
    pub truth: Option<Truth>,
    pub mask: Option<Vec<f64>>,
    /// Full generation provenance, echoed into the container file.
    pub meta: DatasetMeta,
}

/// Provenance block embedded in dataset files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub sim: SimConfig,
    /// Labeled pixel regions (phantom steps), if the scene defines them.
    #[serde(default)]
    pub regions: Vec<Region>,
    /// Per-region IRF delay in ps, parallel to `regions`.
    #[serde(default)]
    pub region_delays_ps: Vec<f64>,
}

impl FliDataset {
    pub fn n_pixels(&self) -> usize {
        self.samples * self.height * self.width
    }

    pub fn axis(&self) -> TimeAxis {
        TimeAxis::new(self.gates, self.dt_ps)
    }

    pub fn tpsf_at(&self, pixel: usize) -> TimeHistogram {
        self.histogram_at(&self.tpsf, pixel)
    }

    pub fn irf_at(&self, pixel: usize) -> TimeHistogram {
        self.histogram_at(&self.irf, pixel)
    }

    fn histogram_at(&self, stack: &[f64], pixel: usize) -> TimeHistogram {
        let g = self.gates;
        TimeHistogram {
            counts: stack[pixel * g..(pixel + 1) * g].to_vec(),
            axis: self.axis(),
            clipped: false,
        }
    }

    pub fn is_foreground(&self, pixel: usize) -> bool {
        match &self.mask {
            Some(m) => m[pixel] > 0.5,
            None => true,
        }
    }

    pub fn foreground_pixels(&self) -> Vec<usize> {
        (0..self.n_pixels()).filter(|&p| self.is_foreground(p)).collect()
    }

    /// Region label for a pixel, if the dataset defines regions.
    pub fn region_of(&self, pixel: usize) -> Option<&str> {
        let side = self.width;
        let within = pixel % (self.height * self.width);
        let (y, x) = (within / side, within % side);
        self.meta
            .regions
            .iter()
            .find(|r| r.contains(x, y))
            .map(|r| r.label.as_str())
    }

    /// Amplitude-weighted mean lifetime of the ground truth at a pixel.
    pub fn truth_tau_m(&self, pixel: usize) -> Option<f64> {
        let t = self.truth.as_ref()?;
        Some(t.a_r[pixel] * t.tau1[pixel] + (1.0 - t.a_r[pixel]) * t.tau2[pixel])
    }
}

/// Procedural stroke mask: a few smoothed random walks stamped with a
/// small brush, sized to roughly match handwritten-digit coverage.
pub fn stroke_mask(seed: u64, sample: u64, side: usize) -> Vec<bool> {
    let mut rng = stream(seed, StreamKind::Mask, sample, 0);
    let mut img = vec![false; side * side];
    let strokes = 2 + (rng::uniform(&mut rng, 0.0, 1.0) * 2.0) as usize;
    for _ in 0..strokes {
        let mut x = rng::uniform(&mut rng, side as f64 * 0.25, side as f64 * 0.75);
        let mut y = rng::uniform(&mut rng, side as f64 * 0.25, side as f64 * 0.75);
        let mut angle = rng::uniform(&mut rng, 0.0, std::f64::consts::TAU);
        let steps = side + (rng::uniform(&mut rng, 0.0, 1.0) * side as f64) as usize;
        for _ in 0..steps {
            angle += rng::uniform(&mut rng, -0.5, 0.5);
            x = (x + angle.cos()).clamp(1.0, side as f64 - 2.0);
            y = (y + angle.sin()).clamp(1.0, side as f64 - 2.0);
            stamp(&mut img, side, x as usize, y as usize);
        }
    }
    img
}

fn stamp(img: &mut [bool], side: usize, cx: usize, cy: usize) {
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            if dx.abs() + dy.abs() > 1 {
                continue;
            }
            let x = cx as i64 + dx;
            let y = cy as i64 + dy;
            if x >= 0 && y >= 0 && (x as usize) < side && (y as usize) < side {
                img[y as usize * side + x as usize] = true;
            }
        }
    }
}

/// What one foreground pixel is made of.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PixelDraw {
    pub params: LifetimeParams,
    pub delay_ps: f64,
    pub peak_counts: f64,
}

pub(crate) fn draw_pixel(cfg: &SimConfig, seed: u64, sample: u64, pixel: u64) -> PixelDraw {
    let mut rng = stream(seed, StreamKind::PixelParams, sample, pixel);
    let mut tau1 = rng::uniform(&mut rng, cfg.tau1_range_ns.0, cfg.tau1_range_ns.1);
    let mut tau2 = rng::uniform(&mut rng, cfg.tau2_range_ns.0, cfg.tau2_range_ns.1);
    if tau1 > tau2 {
        std::mem::swap(&mut tau1, &mut tau2);
    }
    let a_r = rng::uniform(&mut rng, cfg.a_r_range.0, cfg.a_r_range.1);
    let delay_ps = rng::uniform(&mut rng, cfg.delay_range_ps.0, cfg.delay_range_ps.1);
    let peak_counts = rng::uniform(&mut rng, cfg.peak_counts_range.0, cfg.peak_counts_range.1);
    PixelDraw {
        params: LifetimeParams {
            tau1_ns: tau1,
            tau2_ns: tau2,
            a_r,
        },
        delay_ps,
        peak_counts,
    }
}

/// Render one foreground pixel: TPSF (raw counts) and normalized IRF.
pub(crate) fn render_pixel(
    cfg: &SimConfig,
    seed: u64,
    sample: u64,
    pixel: u64,
    draw: &PixelDraw,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let axis = cfg.axis();
    let irf = make_irf(&cfg.irf_model(draw.delay_ps), axis)?;
    let decay = biexp_decay(&draw.params, axis);
    let clean = convolve(&irf, &decay)?;
    let mut noise_rng = stream(seed, StreamKind::PixelNoise, sample, pixel);
    let noisy = if cfg.noise.enabled {
        add_noise(&clean, draw.peak_counts, &cfg.noise, &mut noise_rng)
    } else {
        let mut scaled = clean.clone();
        for c in &mut scaled.counts {
            *c *= draw.peak_counts;
        }
        scaled
    };
    Ok((noisy.counts, irf.counts))
}

/// Generate a dataset of foreground scenes with uniform-random parameters.
pub fn generate_dataset(cfg: &SimConfig, seed: u64) -> Result<FliDataset> {
    cfg.validate()?;
    let masks: Vec<Vec<bool>> = match &cfg.mask {
        MaskSource::Strokes => (0..cfg.samples)
            .map(|n| stroke_mask(seed, n as u64, cfg.image_side))
            .collect(),
        MaskSource::Idx { path, threshold } => {
            let images = super::idx::read_idx_masks(path, *threshold, cfg.image_side)?;
            if images.is_empty() {
                return Err(Error::config("simulate.mask.path", "IDX file holds no images"));
            }
            (0..cfg.samples)
                .map(|n| images[n % images.len()].clone())
                .collect()
        }
    };
    render_dataset(cfg, seed, &masks, |_, _| None)
}

/// Shared renderer. `fixed` lets the phantom pin parameters and delay per
/// pixel instead of drawing them.
pub(crate) fn render_dataset(
    cfg: &SimConfig,
    seed: u64,
    masks: &[Vec<bool>],
    fixed: impl Fn(usize, usize) -> Option<PixelDraw> + Sync,
) -> Result<FliDataset> {
    let side = cfg.image_side;
    let per = cfg.pixels_per_sample();
    let total = cfg.total_pixels();
    let g = cfg.gates;

    struct PixelOut {
        tpsf: Vec<f64>,
        irf: Vec<f64>,
        truth: Option<(f64, f64, f64)>,
    }

    let outputs: Vec<Result<PixelOut>> = (0..total)
        .into_par_iter()
        .map(|p| {
            let sample = p / per;
            let within = p % per;
            if !masks[sample][within] {
                return Ok(PixelOut {
                    tpsf: vec![0.0; g],
                    irf: vec![0.0; g],
                    truth: None,
                });
            }
            let draw = match fixed(sample, within) {
                Some(d) => d,
                None => draw_pixel(cfg, seed, sample as u64, within as u64),
            };
            let (tpsf, irf) = render_pixel(cfg, seed, sample as u64, within as u64, &draw)?;
            Ok(PixelOut {
                tpsf,
                irf,
                truth: Some((draw.params.tau1_ns, draw.params.tau2_ns, draw.params.a_r)),
            })
        })
        .collect();

    // stacks are quantized to f32 so in-memory datasets match their file
    // representation exactly
    let mut tpsf = Vec::with_capacity(total * g);
    let mut irf = Vec::with_capacity(total * g);
    let mut truth = Truth {
        tau1: vec![0.0; total],
        tau2: vec![0.0; total],
        a_r: vec![0.0; total],
    };
    let mut mask = vec![0.0; total];
    for (p, out) in outputs.into_iter().enumerate() {
        let out = out?;
        tpsf.extend_from_slice(&out.tpsf);
        irf.extend_from_slice(&out.irf);
        if let Some((t1, t2, ar)) = out.truth {
            truth.tau1[p] = t1;
            truth.tau2[p] = t2;
            truth.a_r[p] = ar;
            mask[p] = 1.0;
        }
    }

    super::io::quantize_f32(&mut tpsf);
    super::io::quantize_f32(&mut irf);
    super::io::quantize_f32(&mut truth.tau1);
    super::io::quantize_f32(&mut truth.tau2);
    super::io::quantize_f32(&mut truth.a_r);

    Ok(FliDataset {
        samples: cfg.samples,
        height: side,
        width: side,
        gates: g,
        dt_ps: cfg.dt_ps,
        tpsf,
        irf,
        truth: Some(truth),
        mask: Some(mask),
        meta: DatasetMeta {
            seed,
            sim: cfg.clone(),
            regions: Vec::new(),
            region_delays_ps: Vec::new(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SimConfig {
        SimConfig {
            samples: 2,
            image_side: 12,
            gates: 48,
            ..SimConfig::default()
        }
    }

    #[test]
    fn truth_values_stay_in_configured_ranges() {
        let cfg = small_cfg();
        let ds = generate_dataset(&cfg, 5).unwrap();
        let truth = ds.truth.as_ref().unwrap();
        for &p in &ds.foreground_pixels() {
            assert!(truth.tau1[p] >= 0.2 && truth.tau1[p] <= 0.8);
            assert!(truth.tau2[p] >= 0.8 && truth.tau2[p] <= 1.5);
            assert!((0.0..=1.0).contains(&truth.a_r[p]));
            assert!(truth.tau1[p] <= truth.tau2[p]);
        }
    }

    #[test]
    fn masked_out_pixels_are_zero() {
        let ds = generate_dataset(&small_cfg(), 5).unwrap();
        let truth = ds.truth.as_ref().unwrap();
        for p in 0..ds.n_pixels() {
            if !ds.is_foreground(p) {
                assert!(ds.tpsf[p * 48..(p + 1) * 48].iter().all(|&v| v == 0.0));
                assert_eq!(truth.tau1[p], 0.0);
            }
        }
    }

    #[test]
    fn paper_scale_pixel_accounting() {
        // 2000 samples at 28x28 = 1,568,000 signals; checked arithmetically
        let cfg = SimConfig {
            samples: 2000,
            ..SimConfig::default()
        };
        assert_eq!(cfg.total_pixels(), 1_568_000);
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate_dataset(&small_cfg(), 9).unwrap();
        let b = generate_dataset(&small_cfg(), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_range_is_config_error_naming_field() {
        let cfg = SimConfig {
            tau1_range_ns: (0.8, 0.2),
            ..SimConfig::default()
        };
        let err = generate_dataset(&cfg, 1).unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "simulate.tau1_range_ns"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn stroke_masks_have_reasonable_coverage() {
        for sample in 0..6 {
            let m = stroke_mask(3, sample, 28);
            let fg = m.iter().filter(|&&b| b).count() as f64 / m.len() as f64;
            assert!(fg > 0.05 && fg < 0.6, "coverage {fg}");
        }
    }
}
