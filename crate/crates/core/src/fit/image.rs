//! Per-pixel estimation over a dataset: independent fits across the
//! foreground mask, with per-region summary statistics and a CSV report.

use super::{cmm_estimate, lm_fit, FitModelSpec, FitResult};
use crate::error::{Error, Result};
use crate::sim::{make_irf, FliDataset, TimeHistogram};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Which IRF the NLSF model is deconvolved against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IrfSource {
    /// The dataset's zero-delay reference response; arrival delays must be
    /// absorbed by the fitted offset.
    #[default]
    Reference,
    /// The per-pixel response stored in the dataset.
    PixelWise,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FitOutcome {
    /// Full nonlinear fit.
    Nlsf(FitResult),
    /// Centroid-difference estimate.
    Cmm { tau_m_ns: f64 },
    /// The pixel could not be estimated (recorded, never fatal).
    Failed(String),
}

impl FitOutcome {
    pub fn tau_m(&self) -> Option<f64> {
        match self {
            FitOutcome::Nlsf(r) => Some(r.tau_m()),
            FitOutcome::Cmm { tau_m_ns } => Some(*tau_m_ns),
            FitOutcome::Failed(_) => None,
        }
    }

    /// Whether the outcome carries an estimate. A non-converged fit still
    /// reports its best point; only hard failures are excluded.
    pub fn usable(&self) -> bool {
        !matches!(self, FitOutcome::Failed(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelFit {
    pub pixel: usize,
    pub x: usize,
    pub y: usize,
    pub region: String,
    pub outcome: FitOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionStat {
    pub region: String,
    pub mean_tau_m: f64,
    pub std_tau_m: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitImage {
    pub pixels: Vec<PixelFit>,
    pub stats: Vec<RegionStat>,
    pub is_cmm: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FitMethod {
    Nlsf { spec: FitModelSpec, irf: IrfSource },
    Cmm,
}

/// Run independent per-pixel estimation over the foreground. `parallelism`
/// of 1 forces a sequential pass; any other value uses the thread pool.
/// Results are identical either way.
pub fn fit_image(ds: &FliDataset, method: &FitMethod, parallelism: usize) -> Result<FitImage> {
    if let FitMethod::Nlsf { spec, .. } = method {
        spec.validate()?;
    }
    let reference_irf = match method {
        FitMethod::Nlsf {
            irf: IrfSource::Reference,
            ..
        } => Some(make_irf(&ds.meta.sim.irf_model(0.0), ds.axis())?),
        _ => None,
    };

    let fg = ds.foreground_pixels();
    let fit_one = |&p: &usize| -> PixelFit {
        let side = ds.width;
        let within = p % (ds.height * ds.width);
        let (y, x) = (within / side, within % side);
        let region = ds.region_of(p).unwrap_or("fg").to_string();
        let tpsf = ds.tpsf_at(p);
        let outcome = match method {
            FitMethod::Nlsf { spec, irf } => {
                let irf_hist: TimeHistogram = match irf {
                    IrfSource::Reference => reference_irf.clone().unwrap(),
                    IrfSource::PixelWise => ds.irf_at(p),
                };
                match lm_fit(&tpsf, &irf_hist, spec) {
                    Ok(r) => FitOutcome::Nlsf(r),
                    Err(e) => FitOutcome::Failed(e.to_string()),
                }
            }
            FitMethod::Cmm => match cmm_estimate(&tpsf, &ds.irf_at(p)) {
                Ok(tau_m_ns) => FitOutcome::Cmm { tau_m_ns },
                Err(e) => FitOutcome::Failed(e.to_string()),
            },
        };
        PixelFit {
            pixel: p,
            x,
            y,
            region,
            outcome,
        }
    };

    let pixels: Vec<PixelFit> = if parallelism == 1 {
        fg.iter().map(fit_one).collect()
    } else {
        fg.par_iter().map(fit_one).collect()
    };

    let stats = region_stats(ds, &pixels);
    Ok(FitImage {
        pixels,
        stats,
        is_cmm: matches!(method, FitMethod::Cmm),
    })
}

/// Mean/std of tau_m per region over usable fits, in region declaration
/// order ("fg" last for pixels outside any region).
pub fn region_stats(ds: &FliDataset, pixels: &[PixelFit]) -> Vec<RegionStat> {
    let mut order: Vec<String> = ds.meta.regions.iter().map(|r| r.label.clone()).collect();
    if pixels.iter().any(|p| p.region == "fg") {
        order.push("fg".to_string());
    }
    order
        .into_iter()
        .map(|label| {
            let values: Vec<f64> = pixels
                .iter()
                .filter(|p| p.region == label && p.outcome.usable())
                .filter_map(|p| p.outcome.tau_m())
                .collect();
            let count = values.len();
            let mean = if count > 0 {
                values.iter().sum::<f64>() / count as f64
            } else {
                f64::NAN
            };
            let std = if count > 1 {
                (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / (count - 1) as f64)
                    .sqrt()
            } else {
                0.0
            };
            RegionStat {
                region: label,
                mean_tau_m: mean,
                std_tau_m: std,
                count,
            }
        })
        .collect()
}

/// Write the per-pixel fit report. `comments` become leading `#` lines.
pub fn write_fit_csv(path: &Path, image: &FitImage, comments: &[String]) -> Result<()> {
    let mut out = Vec::new();
    for c in comments {
        writeln!(out, "# {c}").unwrap();
    }
    if image.is_cmm {
        writeln!(out, "pixel_x,pixel_y,region,tau_m").unwrap();
        for p in &image.pixels {
            if let FitOutcome::Cmm { tau_m_ns } = &p.outcome {
                writeln!(out, "{},{},{},{}", p.x, p.y, p.region, tau_m_ns).unwrap();
            }
        }
    } else {
        writeln!(
            out,
            "pixel_x,pixel_y,region,tau1,tau2,a_r,t0_ps,tau_m,residual,converged"
        )
        .unwrap();
        for p in &image.pixels {
            if let FitOutcome::Nlsf(r) = &p.outcome {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{}",
                    p.x,
                    p.y,
                    p.region,
                    r.params.tau1_ns,
                    r.params.tau2_ns,
                    r.params.a_r,
                    r.params.t0_ps,
                    r.tau_m(),
                    r.residual_norm,
                    r.converged
                )
                .unwrap();
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One parsed row of a fit or prediction CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TauMRow {
    pub x: usize,
    pub y: usize,
    pub region: Option<String>,
    pub tau_m: f64,
}

/// Read back any CSV that carries a tau_m column, together with the
/// `# key=value` comment headers.
pub fn read_tau_m_csv(path: &Path) -> Result<(Vec<TauMRow>, std::collections::BTreeMap<String, String>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut meta = std::collections::BTreeMap::new();
    let mut rows = Vec::new();
    let mut header: Option<Vec<String>> = None;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.trim().split_once('=') {
                meta.insert(k.trim().to_string(), v.trim().to_string());
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        match &header {
            None => {
                header = Some(fields.iter().map(|s| s.to_string()).collect());
            }
            Some(cols) => {
                let idx = |name: &str| cols.iter().position(|c| c == name);
                let tau_col = idx("tau_m").ok_or_else(|| {
                    Error::Format {
                        path: path.to_path_buf(),
                        kind: crate::error::FormatErrorKind::Corrupt(
                            "csv lacks a tau_m column".into(),
                        ),
                    }
                })?;
                let parse = |s: &str| -> Result<f64> {
                    s.parse::<f64>().map_err(|e| Error::Format {
                        path: path.to_path_buf(),
                        kind: crate::error::FormatErrorKind::Corrupt(format!(
                            "bad number '{s}': {e}"
                        )),
                    })
                };
                rows.push(TauMRow {
                    x: parse(fields[idx("pixel_x").unwrap_or(0)])? as usize,
                    y: parse(fields[idx("pixel_y").unwrap_or(1)])? as usize,
                    region: idx("region").map(|i| fields[i].to_string()),
                    tau_m: parse(fields[tau_col])?,
                });
            }
        }
    }
    Ok((rows, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{make_phantom, PhantomScene, SimConfig};

    fn phantom() -> FliDataset {
        let cfg = SimConfig {
            samples: 1,
            image_side: 12,
            gates: 64,
            ..SimConfig::default()
        };
        let scene = PhantomScene {
            step_heights_mm: vec![0.0, 10.0, 20.0],
            peak_counts: 1500.0,
            ..PhantomScene::default()
        };
        make_phantom(&scene, &cfg, 21).unwrap()
    }

    #[test]
    fn parallel_and_sequential_outputs_identical() {
        let ds = phantom();
        let method = FitMethod::Cmm;
        let seq = fit_image(&ds, &method, 1).unwrap();
        let par = fit_image(&ds, &method, 0).unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn empty_mask_yields_empty_success() {
        let mut ds = phantom();
        ds.mask = Some(vec![0.0; ds.n_pixels()]);
        let out = fit_image(&ds, &FitMethod::Cmm, 1).unwrap();
        assert!(out.pixels.is_empty());
        assert!(out.stats.iter().all(|s| s.count == 0));
    }

    #[test]
    fn csv_round_trip_carries_tau_m_and_meta() {
        let ds = phantom();
        let out = fit_image(&ds, &FitMethod::Cmm, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fit.csv");
        write_fit_csv(&path, &out, &["seed=21".into(), "wall_s=0.5".into()]).unwrap();
        let (rows, meta) = read_tau_m_csv(&path).unwrap();
        assert_eq!(rows.len(), out.pixels.len());
        assert_eq!(meta.get("seed").map(String::as_str), Some("21"));
        assert_eq!(meta.get("wall_s").map(String::as_str), Some("0.5"));
        let first = out.pixels.first().unwrap();
        assert_eq!(rows[0].x, first.x);
        assert_eq!(rows[0].tau_m, first.outcome.tau_m().unwrap());
    }
}
