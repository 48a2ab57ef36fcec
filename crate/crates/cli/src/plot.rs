//! Metric-versus-phase line charts as plain SVG 1.1.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};

use crate::output::{out_file, read_metrics_csv, write, MetricsRow};

pub struct PlotArgs {
    pub input: PathBuf,
    pub out: PathBuf,
    pub metric: String,
}

/// Per-method points `(phase, mean over seeds, seed count)`, methods in order of first appearance.
pub type Series = Vec<(String, Vec<(usize, f64, usize)>)>;

pub fn series(rows: &[MetricsRow], metric: &str) -> Series {
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let m = match order.iter().position(|m| *m == r.method) {
            Some(k) => k,
            None => {
                order.push(r.method.clone());
                order.len() - 1
            }
        };
        if let Some(v) = r.get(metric) {
            let e = acc.entry((m, r.phase)).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    order
        .into_iter()
        .enumerate()
        .map(|(k, name)| {
            let pts = acc
                .range((k, 0)..(k + 1, 0))
                .map(|(&(_, phase), &(sum, n))| (phase, sum / n as f64, n))
                .collect();
            (name, pts)
        })
        .collect()
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders values (fractions) as percentages against phase.
pub fn render_svg(series: &Series, metric: &str) -> String {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (64.0, 180.0, 40.0, 56.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let max_phase = series
        .iter()
        .flat_map(|(_, p)| p.iter().map(|x| x.0))
        .max()
        .unwrap_or(1)
        .max(1);
    let max_val = series
        .iter()
        .flat_map(|(_, p)| p.iter().map(|x| x.1 * 100.0))
        .fold(0.0f64, f64::max);
    let y_max = ((max_val / 10.0).ceil() * 10.0).max(10.0);
    let x = |phase: usize| {
        if max_phase == 1 {
            left + pw / 2.0
        } else {
            left + pw * (phase - 1) as f64 / (max_phase - 1) as f64
        }
    };
    let y = |v: f64| top + ph * (1.0 - v * 100.0 / y_max);

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r##"<rect width="{w}" height="{h}" fill="#ffffff"/>"##);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="15">{} (%) per phase</text>"#,
        left + pw / 2.0,
        escape(&metric.to_uppercase())
    );
    // Axes, grid and ticks.
    let _ = writeln!(s, r##"<g stroke="#000000" stroke-width="1">"##);
    let _ = writeln!(s, r#"<line x1="{left:.2}" y1="{top:.2}" x2="{left:.2}" y2="{:.2}"/>"#, top + ph);
    let _ = writeln!(
        s,
        r#"<line x1="{left:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/>"#,
        top + ph,
        left + pw,
        top + ph
    );
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g class="y-ticks">"#);
    for k in 0..=5 {
        let v = y_max * k as f64 / 5.0;
        let yy = y(v / 100.0);
        let _ = writeln!(
            s,
            r##"<line x1="{left:.2}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.0}</text>"##,
            left + pw,
            left - 6.0,
            yy + 4.0
        );
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g class="x-ticks">"#);
    for phase in 1..=max_phase {
        let xx = x(phase);
        let _ = writeln!(
            s,
            r##"<line x1="{xx:.2}" y1="{:.2}" x2="{xx:.2}" y2="{:.2}" stroke="#000000"/><text x="{xx:.2}" y="{:.2}" text-anchor="middle">{phase}</text>"##,
            top + ph,
            top + ph + 5.0,
            top + ph + 20.0
        );
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">phase</text>"#,
        left + pw / 2.0,
        h - 12.0
    );
    // One polyline per method, plus legend.
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let coords: Vec<String> = pts.iter().map(|&(p, v, _)| format!("{:.2},{:.2}", x(p), y(v))).collect();
        let _ = writeln!(
            s,
            r#"<polyline class="series" data-method="{}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            escape(name),
            coords.join(" ")
        );
        for &(p, v, _) in pts {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, x(p), y(v));
        }
        let ly = top + 10.0 + 20.0 * k as f64;
        let lx = left + pw + 16.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(name)
        );
    }
    let _ = writeln!(s, "</svg>");
    s
}

/// The plotted points as CSV.
pub fn echo_csv(series: &Series) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "phase", "n", "value"])?;
    for (name, pts) in series {
        for &(p, v, n) in pts {
            w.write_record([name.clone(), p.to_string(), n.to_string(), format!("{v:.6}")])?;
        }
    }
    Ok(w.into_inner()?)
}

fn echo_path(svg: &Path) -> PathBuf {
    if svg.extension().is_some_and(|e| e == "csv") {
        let mut p = svg.as_os_str().to_owned();
        p.push(".csv");
        PathBuf::from(p)
    } else {
        svg.with_extension("csv")
    }
}

const METRICS: [&str; 8] = ["ap", "ap50", "ap75", "ap_s", "ap_m", "ap_l", "ap_old", "fpp"];

pub fn run(args: &PlotArgs) -> Result<()> {
    if !METRICS.contains(&args.metric.as_str()) {
        bail!("--metric must be one of {}", METRICS.join(", "));
    }
    let rows = read_metrics_csv(&args.input)?;
    if rows.is_empty() {
        bail!("{} has no rows", args.input.display());
    }
    let series = series(&rows, &args.metric);
    let out = out_file(&args.out);
    write(&out, render_svg(&series, &args.metric).as_bytes())?;
    let echo = echo_csv(&series)?;
    write(&echo_path(&out), &echo)?;
    print!("{}", String::from_utf8_lossy(&echo));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, seed: u64, phase: usize, ap: f64) -> MetricsRow {
        MetricsRow {
            method: method.into(),
            seed,
            phase,
            ap: Some(ap),
            ap50: None,
            ap75: None,
            ap_s: None,
            ap_m: None,
            ap_l: None,
            ap_old: None,
            fpp: None,
        }
    }

    #[test]
    fn four_methods_five_phases() {
        let rows: Vec<MetricsRow> = ["a", "b", "c", "d"]
            .iter()
            .flat_map(|m| (1..=5).map(move |p| row(m, 0, p, 0.1 * p as f64)))
            .collect();
        let svg = render_svg(&series(&rows, "ap"), "ap");
        assert_eq!(svg.matches("<polyline").count(), 4);
        let ticks = svg.split(r#"<g class="x-ticks">"#).nth(1).unwrap().split("</g>").next().unwrap();
        assert_eq!(ticks.matches("<text").count(), 5);
        assert_eq!(svg, render_svg(&series(&rows, "ap"), "ap"));
    }

    #[test]
    fn seeds_are_averaged() {
        let rows = vec![row("m", 0, 1, 0.2), row("m", 1, 1, 0.4), row("m", 0, 2, 0.1)];
        let s = series(&rows, "ap");
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].1.len(), 2);
        assert!((s[0].1[0].1 - 0.3).abs() < 1e-12);
        assert_eq!(s[0].1[0].2, 2);
        assert_eq!(render_svg(&s, "ap").matches("<polyline").count(), 1);
    }

    #[test]
    fn names_are_escaped() {
        let s = series(&[row("a<b&c", 0, 1, 0.5)], "ap");
        let svg = render_svg(&s, "ap");
        assert!(svg.contains("a&lt;b&amp;c"));
        assert!(!svg.contains("a<b"));
    }
}
