//! Evaluation reports: per-region, per-method mean-lifetime statistics
//! against ground truth, with distribution plots.

use crate::error::{Error, Result};
use crate::fit::image::TauMRow;
use crate::sim::FliDataset;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// The methods a report may carry, in output order.
pub const METHODS: [&str; 5] = [
    "mflinet",
    "transformer_std",
    "nlsf_offset",
    "nlsf_no_offset",
    "cmm",
];

#[derive(Debug, Clone)]
pub struct MethodInput {
    pub method: String,
    pub rows: Vec<TauMRow>,
    /// Wall time of the producing run, from the CSV provenance comments.
    pub wall_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub region: String,
    pub tau_m_mean: f64,
    pub tau_m_std: f64,
    pub pixel_count: usize,
    pub mae: f64,
    pub bias: f64,
    pub wall_ms_per_pixel: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Per region and method, the raw values behind the stats (for plots).
    pub samples: BTreeMap<(String, String), Vec<f64>>,
    /// Ground-truth mean lifetime per region.
    pub truth_by_region: BTreeMap<String, f64>,
}

pub fn validate_method(name: &str) -> Result<()> {
    if METHODS.contains(&name) {
        return Ok(());
    }
    Err(Error::config(
        "eval.method",
        format!("unknown method '{name}', expected one of {METHODS:?}"),
    ))
}

fn region_order(ds: &FliDataset) -> Vec<String> {
    let mut order: Vec<String> = ds.meta.regions.iter().map(|r| r.label.clone()).collect();
    if order.is_empty() {
        order.push("fg".to_string());
    }
    order
}

/// Build the per-region, per-method report. The dataset must be a single
/// scene with ground truth; rows are joined by pixel coordinates.
pub fn build_report(ds: &FliDataset, inputs: &[MethodInput]) -> Result<EvalReport> {
    if ds.samples != 1 {
        return Err(Error::config(
            "eval.data",
            format!("evaluation expects a single-scene dataset, found {} samples", ds.samples),
        ));
    }
    if ds.truth.is_none() {
        return Err(Error::config("eval.data", "dataset lacks ground-truth maps"));
    }
    let regions = region_order(ds);
    let mut report = EvalReport::default();

    // region truth: mean ground-truth tau_m over region pixels
    for label in &regions {
        let mut sum = 0.0;
        let mut count = 0usize;
        for p in ds.foreground_pixels() {
            let r = ds.region_of(p).unwrap_or("fg");
            if r == label {
                sum += ds.truth_tau_m(p).unwrap();
                count += 1;
            }
        }
        if count > 0 {
            report.truth_by_region.insert(label.clone(), sum / count as f64);
        }
    }

    for input in inputs {
        validate_method(&input.method)?;
        // group rows by region
        let mut by_region: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for row in &input.rows {
            if row.x >= ds.width || row.y >= ds.height {
                return Err(Error::config(
                    "eval.rows",
                    format!("pixel ({}, {}) outside the {}x{} scene", row.x, row.y, ds.width, ds.height),
                ));
            }
            let pixel = row.y * ds.width + row.x;
            let region = ds
                .region_of(pixel)
                .unwrap_or("fg")
                .to_string();
            if let Some(claimed) = &row.region {
                if claimed != &region {
                    return Err(Error::config(
                        "eval.rows",
                        format!(
                            "row at ({}, {}) claims region '{claimed}' but the dataset says '{region}'",
                            row.x, row.y
                        ),
                    ));
                }
            }
            let truth = ds.truth_tau_m(pixel).ok_or_else(|| {
                Error::config("eval.rows", format!("no ground truth at ({}, {})", row.x, row.y))
            })?;
            by_region.entry(region).or_default().push((row.tau_m, truth));
        }

        let wall_ms_per_pixel = input
            .wall_s
            .map(|w| 1000.0 * w / input.rows.len().max(1) as f64);
        for label in &regions {
            let pairs = by_region.get(label).cloned().unwrap_or_default();
            let count = pairs.len();
            let mean = if count > 0 {
                pairs.iter().map(|(v, _)| v).sum::<f64>() / count as f64
            } else {
                f64::NAN
            };
            let std = if count > 1 {
                (pairs
                    .iter()
                    .map(|(v, _)| (v - mean) * (v - mean))
                    .sum::<f64>()
                    / (count - 1) as f64)
                    .sqrt()
            } else {
                0.0
            };
            let mae = if count > 0 {
                pairs.iter().map(|(v, t)| (v - t).abs()).sum::<f64>() / count as f64
            } else {
                f64::NAN
            };
            let bias = if count > 0 {
                pairs.iter().map(|(v, t)| v - t).sum::<f64>() / count as f64
            } else {
                f64::NAN
            };
            report
                .samples
                .insert((label.clone(), input.method.clone()), pairs.iter().map(|(v, _)| *v).collect());
            report.rows.push(EvalRow {
                method: input.method.clone(),
                region: label.clone(),
                tau_m_mean: mean,
                tau_m_std: std,
                pixel_count: count,
                mae,
                bias,
                wall_ms_per_pixel,
            });
        }
    }
    Ok(report)
}

impl EvalReport {
    pub fn to_csv(&self, comments: &[String]) -> String {
        let mut out = String::new();
        for c in comments {
            writeln!(out, "# {c}").unwrap();
        }
        writeln!(
            out,
            "method,region,tau_m_mean,tau_m_std,pixel_count,mae,bias,wall_ms_per_pixel"
        )
        .unwrap();
        for r in &self.rows {
            let wall = r
                .wall_ms_per_pixel
                .map(|w| w.to_string())
                .unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.method, r.region, r.tau_m_mean, r.tau_m_std, r.pixel_count, r.mae, r.bias, wall
            )
            .unwrap();
        }
        out
    }

    /// (standard deviation of per-region means, pixel-weighted MAE) for a
    /// method, across its regions.
    pub fn step_spread(&self, method: &str) -> Option<(f64, f64)> {
        let rows: Vec<&EvalRow> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.pixel_count > 0)
            .collect();
        if rows.is_empty() {
            return None;
        }
        let means: Vec<f64> = rows.iter().map(|r| r.tau_m_mean).collect();
        let grand = means.iter().sum::<f64>() / means.len() as f64;
        let std = if means.len() > 1 {
            (means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>()
                / (means.len() - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        let total: usize = rows.iter().map(|r| r.pixel_count).sum();
        let mae = rows
            .iter()
            .map(|r| r.mae * r.pixel_count as f64)
            .sum::<f64>()
            / total as f64;
        Some((std, mae))
    }

    /// Per-region distribution plots, one SVG per region.
    pub fn write_svgs(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        let mut regions: Vec<String> = Vec::new();
        for r in &self.rows {
            if !regions.contains(&r.region) {
                regions.push(r.region.clone());
            }
        }
        let mut written = Vec::new();
        for region in regions {
            let methods: Vec<(String, Vec<f64>)> = self
                .rows
                .iter()
                .filter(|r| r.region == region)
                .map(|r| {
                    let values = self
                        .samples
                        .get(&(region.clone(), r.method.clone()))
                        .cloned()
                        .unwrap_or_default();
                    (r.method.clone(), values)
                })
                .collect();
            let truth = self.truth_by_region.get(&region).copied();
            let path = dir.join(format!("region_{region}.svg"));
            crate::svg::write_distribution_svg(&path, &region, truth, &methods)?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Parse a `# key=value` comment map for the wall time recorded by the
/// producing command.
pub fn wall_seconds(meta: &BTreeMap<String, String>) -> Option<f64> {
    meta.get("wall_s").and_then(|s| s.parse().ok())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{make_phantom, PhantomScene, SimConfig};

    fn phantom() -> FliDataset {
        let cfg = SimConfig {
            samples: 1,
            image_side: 12,
            gates: 32,
            ..SimConfig::default()
        };
        let scene = PhantomScene {
            step_heights_mm: vec![0.0, 10.0, 20.0],
            ..PhantomScene::default()
        };
        make_phantom(&scene, &cfg, 77).unwrap()
    }

    fn rows_from_truth(ds: &FliDataset) -> Vec<TauMRow> {
        ds.foreground_pixels()
            .into_iter()
            .map(|p| {
                let within = p % (ds.height * ds.width);
                TauMRow {
                    x: within % ds.width,
                    y: within / ds.width,
                    region: None,
                    tau_m: ds.truth_tau_m(p).unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn truth_against_truth_has_zero_mae() {
        let ds = phantom();
        let inputs = vec![MethodInput {
            method: "cmm".into(),
            rows: rows_from_truth(&ds),
            wall_s: Some(1.0),
        }];
        let report = build_report(&ds, &inputs).unwrap();
        assert_eq!(report.rows.len(), 3);
        for r in &report.rows {
            assert!(r.mae.abs() < 1e-12);
            assert!(r.bias.abs() < 1e-12);
            assert!(r.wall_ms_per_pixel.is_some());
        }
    }

    #[test]
    fn row_count_is_methods_times_regions() {
        let ds = phantom();
        let rows = rows_from_truth(&ds);
        let inputs: Vec<MethodInput> = ["mflinet", "cmm", "nlsf_offset"]
            .iter()
            .map(|m| MethodInput {
                method: m.to_string(),
                rows: rows.clone(),
                wall_s: None,
            })
            .collect();
        let report = build_report(&ds, &inputs).unwrap();
        assert_eq!(report.rows.len(), 3 * 3);
    }

    #[test]
    fn unknown_method_rejected() {
        let ds = phantom();
        let inputs = vec![MethodInput {
            method: "wizardry".into(),
            rows: rows_from_truth(&ds),
            wall_s: None,
        }];
        assert!(matches!(
            build_report(&ds, &inputs),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn region_mismatch_rejected() {
        let ds = phantom();
        let mut rows = rows_from_truth(&ds);
        rows[0].region = Some("step2".into());
        let right = ds.region_of(ds.foreground_pixels()[0]).unwrap();
        if right == "step2" {
            rows[0].region = Some("step0".into());
        }
        let inputs = vec![MethodInput {
            method: "cmm".into(),
            rows,
            wall_s: None,
        }];
        assert!(matches!(
            build_report(&ds, &inputs),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn step_spread_of_flat_method_is_zero() {
        let ds = phantom();
        let inputs = vec![MethodInput {
            method: "cmm".into(),
            rows: rows_from_truth(&ds),
            wall_s: None,
        }];
        let report = build_report(&ds, &inputs).unwrap();
        let (std, mae) = report.step_spread("cmm").unwrap();
        assert!(std < 1e-9, "constant truth has no spread, got {std}");
        assert!(mae < 1e-12);
    }
}
