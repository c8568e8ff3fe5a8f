//! Command implementations. Every command is reproducible from
//! (config, seed); outputs embed both as `#` provenance comments or
//! container metadata.

use crate::config::{RunConfig, SceneKind};
use fli_core::error::{Error, Result};
use fli_core::eval::{build_report, wall_seconds, MethodInput};
use fli_core::fit::image::{
    fit_image, read_tau_m_csv, write_fit_csv, FitMethod,
};
use fli_core::model::infer::predict_dataset;
use fli_core::model::io::{load_weights, save_weights};
use fli_core::sim::dataset::MaskSource;
use fli_core::sim::io::{read_dataset, write_dataset};
use fli_core::sim::{generate_dataset, make_phantom, FliDataset};
use fli_core::suite::{run_full_suite, SuiteOptions};
use fli_core::train::run::train as train_model;
use std::fmt::Write as _;
use std::path::Path;

pub fn simulate(cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let section = &cfg.simulate;
    let ds = match section.scene {
        SceneKind::Phantom => make_phantom(&section.phantom, &section.sim, seed)?,
        SceneKind::Strokes => {
            let mut sim = section.sim.clone();
            sim.mask = MaskSource::Strokes;
            generate_dataset(&sim, seed)?
        }
        SceneKind::Idx => {
            if !matches!(section.sim.mask, MaskSource::Idx { .. }) {
                return Err(Error::config(
                    "simulate.sim.mask",
                    "scene 'idx' needs simulate.sim.mask = {kind: idx, path, threshold}",
                ));
            }
            generate_dataset(&section.sim, seed)?
        }
    };
    write_dataset(out, &ds)?;
    let fg = ds.foreground_pixels().len();
    println!(
        "dataset: {} sample(s), {}x{} px, {} gates, {} foreground px",
        ds.samples, ds.height, ds.width, ds.gates, fg
    );
    match section.scene {
        SceneKind::Phantom => {
            let delays = &ds.meta.region_delays_ps;
            println!("phantom step delays: {delays:?} ps");
        }
        _ => {
            let (lo, hi) = section.sim.delay_range_ps;
            println!("per-pixel delays uniform in [{lo}, {hi}] ps");
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn train(
    cfg: &RunConfig,
    seed: u64,
    data: &Path,
    model_out: &Path,
    ablate_irf: bool,
    log_out: Option<&Path>,
    checkpoint_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<()> {
    let ds = read_dataset(data)?;
    let mut model_cfg = cfg.model;
    // the architecture follows the data's gate count and scene size
    model_cfg.gates = ds.gates;
    model_cfg.image_side = ds.width;
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let outcome = train_model(&ds, &model_cfg, &cfg.train, ablate_irf, checkpoint_dir, resume)?;
    save_weights(model_out, &outcome.best_weights, Some(seed))?;

    let log_path = log_out
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| model_out.with_extension("log.csv"));
    let comments = vec![
        format!("seed={seed}"),
        format!("ablate_irf={ablate_irf}"),
        format!("config={}", cfg.echo()),
    ];
    std::fs::write(&log_path, outcome.log.to_csv(&comments))
        .map_err(|e| Error::io(&log_path, e))?;

    if let Some(last) = outcome.log.rows.last() {
        println!(
            "trained {} epochs: train {:.6}, val {:.6} (best {:.6})",
            outcome.log.rows.len(),
            last.train_total,
            last.val_total,
            outcome
                .log
                .rows
                .iter()
                .map(|r| r.val_total)
                .fold(f64::INFINITY, f64::min),
        );
    }
    println!("wrote {} and {}", model_out.display(), log_path.display());
    Ok(())
}

pub fn predict(
    cfg: &RunConfig,
    seed: u64,
    data: &Path,
    model: &Path,
    out: &Path,
    ablate_irf: bool,
) -> Result<()> {
    let ds = read_dataset(data)?;
    let weights = load_weights(model, None)?;
    let pred = predict_dataset(&weights, &ds, ablate_irf, 0)?;
    let rate = pred.pixels as f64 / pred.wall_s.max(1e-9);

    let mut text = String::new();
    writeln!(text, "# seed={seed}").unwrap();
    writeln!(text, "# model={}", model.display()).unwrap();
    writeln!(text, "# ablate_irf={ablate_irf}").unwrap();
    writeln!(text, "# wall_s={}", pred.wall_s).unwrap();
    writeln!(text, "# pixels={}", pred.pixels).unwrap();
    writeln!(text, "# pixels_per_s={rate}").unwrap();
    writeln!(text, "# config={}", cfg.echo()).unwrap();
    writeln!(text, "pixel_x,pixel_y,tau1,tau2,a_r,tau_m").unwrap();
    for p in ds.foreground_pixels() {
        let within = p % (ds.height * ds.width);
        let (y, x) = (within / ds.width, within % ds.width);
        writeln!(
            text,
            "{},{},{},{},{},{}",
            x,
            y,
            pred.tau1[p],
            pred.tau2[p],
            pred.a_r[p],
            pred.tau_m(p)
        )
        .unwrap();
    }
    std::fs::write(out, text).map_err(|e| Error::io(out, e))?;
    println!(
        "predicted {} px in {:.2}s ({:.0} px/s), wrote {}",
        pred.pixels,
        pred.wall_s,
        rate,
        out.display()
    );
    Ok(())
}

pub fn fit(
    cfg: &RunConfig,
    seed: u64,
    data: &Path,
    cmm: bool,
    offset_correction: bool,
    out: &Path,
) -> Result<()> {
    let ds = read_dataset(data)?;
    let method = if cmm {
        FitMethod::Cmm
    } else {
        let mut spec = cfg.fit.spec;
        spec.fit_offset = offset_correction;
        FitMethod::Nlsf {
            spec,
            irf: cfg.fit.irf,
        }
    };
    let start = std::time::Instant::now();
    let image = fit_image(&ds, &method, 0)?;
    let wall_s = start.elapsed().as_secs_f64();

    let comments = vec![
        format!("seed={seed}"),
        format!("mode={}", if cmm { "cmm" } else { "nlsf" }),
        format!("offset_correction={offset_correction}"),
        format!("wall_s={wall_s}"),
        format!("pixels={}", image.pixels.len()),
        format!("config={}", cfg.echo()),
    ];
    write_fit_csv(out, &image, &comments)?;
    for s in &image.stats {
        println!(
            "region {:>8}: tau_m {:.4} +- {:.4} ns over {} px",
            s.region, s.mean_tau_m, s.std_tau_m, s.count
        );
    }
    println!(
        "fit {} px in {:.2}s, wrote {}",
        image.pixels.len(),
        wall_s,
        out.display()
    );
    Ok(())
}

fn parse_method_args(args: &[String]) -> Result<Vec<(String, std::path::PathBuf)>> {
    args.iter()
        .map(|a| {
            a.split_once('=')
                .map(|(m, p)| (m.to_string(), std::path::PathBuf::from(p)))
                .ok_or_else(|| {
                    Error::config("eval.inputs", format!("expected method=path, got '{a}'"))
                })
        })
        .collect()
}

pub fn eval(
    cfg: &RunConfig,
    seed: u64,
    data: &Path,
    preds: &[String],
    fits: &[String],
    report_dir: &Path,
) -> Result<()> {
    let ds: FliDataset = read_dataset(data)?;
    let mut inputs = Vec::new();
    for (method, path) in parse_method_args(preds)?
        .into_iter()
        .chain(parse_method_args(fits)?)
    {
        let (rows, meta) = read_tau_m_csv(&path)?;
        inputs.push(MethodInput {
            method,
            rows,
            wall_s: wall_seconds(&meta),
        });
    }
    if inputs.is_empty() {
        return Err(Error::config(
            "eval.inputs",
            "no --pred or --fits inputs given",
        ));
    }
    let report = build_report(&ds, &inputs)?;
    std::fs::create_dir_all(report_dir).map_err(|e| Error::io(report_dir, e))?;
    let csv_path = report_dir.join("report.csv");
    let comments = vec![format!("seed={seed}"), format!("config={}", cfg.echo())];
    std::fs::write(&csv_path, report.to_csv(&comments)).map_err(|e| Error::io(&csv_path, e))?;
    let svgs = if cfg.eval.svg {
        report.write_svgs(report_dir)?
    } else {
        Vec::new()
    };

    for r in &report.rows {
        println!(
            "{:>16} {:>8}: mean {:.4} std {:.4} (n={}), mae {:.4}, bias {:+.4}",
            r.method, r.region, r.tau_m_mean, r.tau_m_std, r.pixel_count, r.mae, r.bias
        );
    }
    println!(
        "wrote {} and {} svg plot(s)",
        csv_path.display(),
        svgs.len()
    );
    Ok(())
}

pub fn gradcheck(seeds: u64) -> Result<()> {
    let start = std::time::Instant::now();
    let reports = run_full_suite(&SuiteOptions {
        seeds,
        ..SuiteOptions::default()
    })?;
    let mut failed = 0;
    for r in &reports {
        println!(
            "{:<24} {:>8} components  max rel err {:.3e}  (tol {:.0e})  {}",
            r.name,
            r.components,
            r.max_rel_err,
            r.tolerance,
            if r.pass() { "PASS" } else { "FAIL" }
        );
        if !r.pass() {
            failed += 1;
        }
    }
    println!(
        "{} checks, {} seeds, {:.1}s",
        reports.len(),
        seeds,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(Error::Numerical(format!(
            "{failed} gradient check(s) failed"
        )));
    }
    Ok(())
}
