//! Step-ladder phantom: stepped regions of constant lifetime whose only
//! difference is the height-induced photon arrival delay.

use super::dataset::{render_dataset, FliDataset, PixelDraw, SimConfig};
use super::LifetimeParams;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Half-open pixel rectangle with a label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub label: String,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Region {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    fn overlaps(&self, other: &Region) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomScene {
    /// Step heights in mm; one region per step.
    pub step_heights_mm: Vec<f64>,
    /// Arrival shift per mm of height; negative because raising the
    /// surface shortens the optical path.
    pub delay_slope_ps_per_mm: f64,
    /// Embedding lifetime, shared by every step.
    pub embedding: LifetimeParams,
    /// Photon budget for every phantom pixel.
    pub peak_counts: f64,
    /// Explicit regions; when empty, vertical strips are laid out
    /// automatically, one per step.
    pub regions: Vec<Region>,
}

impl Default for PhantomScene {
    fn default() -> Self {
        PhantomScene {
            step_heights_mm: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            delay_slope_ps_per_mm: -8.0,
            embedding: LifetimeParams {
                tau1_ns: 0.5,
                tau2_ns: 1.2,
                a_r: 0.3,
            },
            peak_counts: 2000.0,
            regions: Vec::new(),
        }
    }
}

impl PhantomScene {
    pub fn step_delays_ps(&self) -> Vec<f64> {
        self.step_heights_mm
            .iter()
            .map(|h| h * self.delay_slope_ps_per_mm)
            .collect()
    }

    /// Regions to use, generating the default strip layout when none are
    /// configured.
    pub fn resolve_regions(&self, image_side: usize) -> Result<Vec<Region>> {
        let regions = if self.regions.is_empty() {
            default_strips(self.step_heights_mm.len(), image_side)?
        } else {
            self.regions.clone()
        };
        if regions.len() != self.step_heights_mm.len() {
            return Err(Error::config(
                "simulate.phantom.regions",
                format!(
                    "{} regions configured for {} steps",
                    regions.len(),
                    self.step_heights_mm.len()
                ),
            ));
        }
        for r in &regions {
            if r.x1 <= r.x0 || r.y1 <= r.y0 || r.x1 > image_side || r.y1 > image_side {
                return Err(Error::config(
                    "simulate.phantom.regions",
                    format!("region '{}' is empty or out of bounds", r.label),
                ));
            }
        }
        for i in 0..regions.len() {
            for j in i + 1..regions.len() {
                if regions[i].overlaps(&regions[j]) {
                    return Err(Error::config(
                        "simulate.phantom.regions",
                        format!(
                            "regions '{}' and '{}' overlap",
                            regions[i].label, regions[j].label
                        ),
                    ));
                }
            }
        }
        Ok(regions)
    }

    pub fn validate(&self) -> Result<()> {
        if self.step_heights_mm.is_empty() {
            return Err(Error::config("simulate.phantom.step_heights_mm", "needs at least one step"));
        }
        if self.peak_counts <= 0.0 {
            return Err(Error::config("simulate.phantom.peak_counts", "must be > 0"));
        }
        LifetimeParams::new(
            self.embedding.tau1_ns,
            self.embedding.tau2_ns,
            self.embedding.a_r,
        )?;
        Ok(())
    }
}

fn default_strips(steps: usize, side: usize) -> Result<Vec<Region>> {
    // vertical strips with a 1px gap, vertically inset by 2px
    let gap = 1usize;
    let margin = 2usize;
    let avail = side.saturating_sub(2 * margin);
    if steps == 0 || avail < steps * 2 + (steps - 1) * gap {
        return Err(Error::config(
            "simulate.image_side",
            format!("side {side} too small for {steps} phantom strips"),
        ));
    }
    let width = (avail - (steps - 1) * gap) / steps;
    let mut regions = Vec::with_capacity(steps);
    for i in 0..steps {
        let x0 = margin + i * (width + gap);
        regions.push(Region {
            label: format!("step{i}"),
            x0,
            y0: margin,
            x1: x0 + width,
            y1: side - margin,
        });
    }
    Ok(regions)
}

/// Build the phantom dataset: every pixel of step `i` shares the same
/// embedding lifetime and the delay `height_i * slope`.
pub fn make_phantom(scene: &PhantomScene, cfg: &SimConfig, seed: u64) -> Result<FliDataset> {
    scene.validate()?;
    cfg.validate()?;
    let regions = scene.resolve_regions(cfg.image_side)?;
    let delays = scene.step_delays_ps();
    let side = cfg.image_side;

    // per-pixel step lookup
    let per = cfg.pixels_per_sample();
    let mut step_of = vec![usize::MAX; per];
    for (i, r) in regions.iter().enumerate() {
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                step_of[y * side + x] = i;
            }
        }
    }
    let masks: Vec<Vec<bool>> = (0..cfg.samples)
        .map(|_| step_of.iter().map(|&s| s != usize::MAX).collect())
        .collect();

    let scene_for_render = scene.clone();
    let step_lookup = step_of.clone();
    let delays_for_render = delays.clone();
    let mut ds = render_dataset(cfg, seed, &masks, move |_, within| {
        let step = step_lookup[within];
        if step == usize::MAX {
            return None;
        }
        Some(PixelDraw {
            params: scene_for_render.embedding,
            delay_ps: delays_for_render[step],
            peak_counts: scene_for_render.peak_counts,
        })
    })?;
    ds.meta.regions = regions;
    ds.meta.region_delays_ps = delays;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SimConfig {
        SimConfig {
            samples: 1,
            image_side: 28,
            gates: 64,
            ..SimConfig::default()
        }
    }

    #[test]
    fn default_step_delays() {
        let scene = PhantomScene::default();
        assert_eq!(scene.step_delays_ps(), vec![0.0, -40.0, -80.0, -120.0, -160.0]);
    }

    #[test]
    fn default_embedding_mean_lifetime() {
        let scene = PhantomScene::default();
        let e = scene.embedding;
        let tau_m = e.a_r * e.tau1_ns + (1.0 - e.a_r) * e.tau2_ns;
        assert!((tau_m - 0.99).abs() < 1e-12);
    }

    #[test]
    fn truth_constant_across_steps() {
        let ds = make_phantom(&PhantomScene::default(), &cfg(), 3).unwrap();
        // truth maps are stored at f32 precision
        for &p in &ds.foreground_pixels() {
            assert!((ds.truth_tau_m(p).unwrap() - 0.99).abs() < 1e-6);
        }
        assert_eq!(ds.meta.regions.len(), 5);
    }

    #[test]
    fn overlapping_regions_rejected() {
        let scene = PhantomScene {
            regions: vec![
                Region { label: "a".into(), x0: 0, y0: 0, x1: 10, y1: 10 },
                Region { label: "b".into(), x0: 5, y0: 5, x1: 15, y1: 15 },
                Region { label: "c".into(), x0: 20, y0: 0, x1: 22, y1: 4 },
                Region { label: "d".into(), x0: 22, y0: 6, x1: 24, y1: 8 },
                Region { label: "e".into(), x0: 24, y0: 10, x1: 26, y1: 12 },
            ],
            ..PhantomScene::default()
        };
        assert!(matches!(
            make_phantom(&scene, &cfg(), 0),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn regions_partition_foreground() {
        let ds = make_phantom(&PhantomScene::default(), &cfg(), 3).unwrap();
        for &p in &ds.foreground_pixels() {
            assert!(ds.region_of(p).is_some());
        }
    }
}
