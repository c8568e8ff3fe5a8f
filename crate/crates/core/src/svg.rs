//! Static SVG distribution plots: per-method quantile silhouettes with a
//! ground-truth line. Self-contained files, no display server involved.

use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 60.0;
const BINS: usize = 17;

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Violin-style silhouette from a histogram density over the value range.
fn silhouette(values: &[f64], lo: f64, hi: f64) -> Vec<(f64, f64)> {
    let mut counts = vec![0.0f64; BINS];
    let span = (hi - lo).max(1e-12);
    for &v in values {
        let bin = (((v - lo) / span) * BINS as f64).floor().clamp(0.0, BINS as f64 - 1.0);
        counts[bin as usize] += 1.0;
    }
    let peak = counts.iter().cloned().fold(0.0, f64::max).max(1.0);
    (0..BINS)
        .map(|b| {
            let center = lo + span * (b as f64 + 0.5) / BINS as f64;
            (center, counts[b] / peak)
        })
        .collect()
}

/// Write one region's distribution plot. `methods` holds per-method raw
/// mean-lifetime values; empty distributions are drawn as labels only.
pub fn write_distribution_svg(
    path: &Path,
    region: &str,
    truth: Option<f64>,
    methods: &[(String, Vec<f64>)],
) -> Result<()> {
    let mut all: Vec<f64> = methods
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite())
        .collect();
    if let Some(t) = truth {
        all.push(t);
    }
    if all.is_empty() {
        all.push(0.0);
        all.push(1.0);
    }
    let lo_raw = all.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi_raw = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi_raw - lo_raw) * 0.1).max(0.02);
    let (lo, hi) = (lo_raw - pad, hi_raw + pad);

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let y_of = |v: f64| MARGIN_TOP + plot_h * (1.0 - (v - lo) / (hi - lo));
    let slot_w = plot_w / methods.len().max(1) as f64;
    let half_violin = slot_w * 0.32;

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(
        svg,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">mean lifetime by method, region {region}</text>"#,
        WIDTH / 2.0
    )
    .unwrap();

    // y axis with ticks
    writeln!(
        svg,
        r#"<line x1="{MARGIN_LEFT}" y1="{MARGIN_TOP}" x2="{MARGIN_LEFT}" y2="{}" stroke="black"/>"#,
        MARGIN_TOP + plot_h
    )
    .unwrap();
    for i in 0..=5 {
        let v = lo + (hi - lo) * i as f64 / 5.0;
        let y = y_of(v);
        writeln!(
            svg,
            r#"<line x1="{}" y1="{y}" x2="{MARGIN_LEFT}" y2="{y}" stroke="black"/>"#,
            MARGIN_LEFT - 5.0
        )
        .unwrap();
        writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.3}</text>"#,
            MARGIN_LEFT - 8.0,
            y + 4.0
        )
        .unwrap();
    }
    writeln!(
        svg,
        r#"<text x="16" y="{}" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {})">tau_m (ns)</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0
    )
    .unwrap();

    if let Some(t) = truth {
        let y = y_of(t);
        writeln!(
            svg,
            r##"<line x1="{MARGIN_LEFT}" y1="{y}" x2="{}" y2="{y}" stroke="#2a9d2a" stroke-dasharray="6,4"/>"##,
            MARGIN_LEFT + plot_w
        )
        .unwrap();
        writeln!(
            svg,
            r##"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="#2a9d2a">truth {t:.3}</text>"##,
            MARGIN_LEFT + 4.0,
            y - 4.0
        )
        .unwrap();
    }

    for (i, (name, values)) in methods.iter().enumerate() {
        let cx = MARGIN_LEFT + slot_w * (i as f64 + 0.5);
        writeln!(
            svg,
            r#"<text x="{cx}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{name}</text>"#,
            MARGIN_TOP + plot_h + 20.0
        )
        .unwrap();
        let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if sorted.is_empty() {
            continue;
        }
        writeln!(
            svg,
            r##"<text x="{cx}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle" fill="#666">n={}</text>"##,
            MARGIN_TOP + plot_h + 36.0,
            sorted.len()
        )
        .unwrap();

        // silhouette polygon over the method's own value range
        let vlo = sorted[0];
        let vhi = sorted[sorted.len() - 1];
        if vhi > vlo {
            let sil = silhouette(&sorted, vlo, vhi);
            let mut pts = Vec::new();
            for (v, w) in &sil {
                pts.push(format!("{},{}", cx - half_violin * w, y_of(*v)));
            }
            for (v, w) in sil.iter().rev() {
                pts.push(format!("{},{}", cx + half_violin * w, y_of(*v)));
            }
            writeln!(
                svg,
                r##"<polygon points="{}" fill="#7aa4d6" fill-opacity="0.55" stroke="#34577f" stroke-width="0.8"/>"##,
                pts.join(" ")
            )
            .unwrap();
        }

        // quartile box and median tick
        let q1 = quantile(&sorted, 0.25);
        let q2 = quantile(&sorted, 0.5);
        let q3 = quantile(&sorted, 0.75);
        let bw = half_violin * 0.35;
        writeln!(
            svg,
            r##"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#1d3557" stroke-width="1.2"/>"##,
            cx - bw,
            y_of(q3),
            2.0 * bw,
            (y_of(q1) - y_of(q3)).max(0.5)
        )
        .unwrap();
        writeln!(
            svg,
            r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#e63946" stroke-width="2"/>"##,
            cx - bw,
            y_of(q2),
            cx + bw,
            y_of(q2)
        )
        .unwrap();
    }

    writeln!(svg, "</svg>").unwrap();
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}
