//! Static SVG fan charts from forecast artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use loadcast::{Error, Result};

type Rows = BTreeMap<(String, String), Vec<(String, Vec<f64>)>>;

/// Rows of an `entity,day,<label>,t0..` (or `entity,day,t0..` when
/// `labeled` is false) file grouped by (entity, day).
fn read_rows(path: &Path, labeled: bool) -> Result<Rows> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out: Rows = BTreeMap::new();
    let skip = if labeled { 3 } else { 2 };
    for rec in r.records() {
        let rec = rec?;
        let values = rec
            .iter()
            .skip(skip)
            .map(|s| if s.is_empty() { Ok(f64::NAN) } else { s.parse::<f64>() })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let label = if labeled { rec[2].to_string() } else { String::new() };
        out.entry((rec[0].to_string(), rec[1].to_string())).or_default().push((label, values));
    }
    Ok(out)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn polyline(points: &[(f64, f64)], style: &str) -> String {
    let pts: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    format!("<polyline fill=\"none\" {style} points=\"{}\"/>\n", pts.join(" "))
}

/// Write one SVG per entity into `<dir>/plots`; returns the files written.
pub fn plot(dir: &Path, entities: Option<&[String]>) -> Result<Vec<std::path::PathBuf>> {
    let fdir = dir.join(crate::commands::FORECAST_DIR);
    let fans_path = fdir.join("fans.csv");
    if !fans_path.is_file() {
        return Err(Error::MissingArtifact(fans_path));
    }
    let fans = read_rows(&fans_path, true)?;
    let load_opt = |name: &str, labeled: bool| -> Result<Option<Rows>> {
        let p = fdir.join(name);
        if p.is_file() {
            read_rows(&p, labeled).map(Some)
        } else {
            Ok(None)
        }
    };
    let truths = load_opt("truths.csv", false)?;
    let best = load_opt("best_traces.csv", true)?;
    let bands = load_opt("bands.csv", true)?;

    let mut by_entity: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (e, d) in fans.keys() {
        if entities.is_none_or(|w| w.iter().any(|x| x == e)) {
            by_entity.entry(e).or_default().push(d);
        }
    }
    if by_entity.is_empty() {
        return Err(Error::MissingArtifact(fans_path));
    }
    let out_dir = dir.join("plots");
    std::fs::create_dir_all(&out_dir)?;
    let mut written = Vec::new();
    for (entity, days) in by_entity {
        let svg = render(entity, &days, &fans, truths.as_ref(), best.as_ref(), bands.as_ref());
        let safe: String = entity
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        let p = out_dir.join(format!("{safe}.svg"));
        std::fs::write(&p, svg)?;
        written.push(p);
    }
    Ok(written)
}

fn render(entity: &str, days: &[&str], fans: &Rows, truths: Option<&Rows>, best: Option<&Rows>, bands: Option<&Rows>) -> String {
    let key = |d: &str| (entity.to_string(), d.to_string());
    let dim = fans[&key(days[0])][0].1.len();
    let steps = days.len() * dim;
    let (width, left, top, plot_h) = (1000.0, 60.0, 40.0, 300.0);
    let plot_w = width - left - 20.0;
    let band_h = if bands.is_some() { 160.0 } else { 0.0 };
    let height = top + plot_h + 40.0 + band_h + if bands.is_some() { 40.0 } else { 0.0 };

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut extend = |rows: Option<&Vec<(String, Vec<f64>)>>| {
        for (_, v) in rows.into_iter().flatten() {
            for x in v.iter().filter(|x| x.is_finite()) {
                lo = lo.min(*x);
                hi = hi.max(*x);
            }
        }
    };
    for d in days {
        extend(fans.get(&key(d)));
        extend(truths.and_then(|t| t.get(&key(d))));
        extend(best.and_then(|t| t.get(&key(d))));
    }
    if !(hi > lo) {
        hi = lo + 1.0;
    }
    let x_of = |i: usize| left + plot_w * i as f64 / (steps.max(2) - 1) as f64;
    let y_of = |v: f64| top + plot_h * (hi - v) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    );
    let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{left}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{} ({} to {})</text>",
        escape(entity),
        escape(days[0]),
        escape(days[days.len() - 1])
    );
    let _ = writeln!(
        s,
        "<rect x=\"{left}\" y=\"{top}\" width=\"{plot_w}\" height=\"{plot_h}\" fill=\"none\" stroke=\"#999\"/>"
    );
    for v in [lo, (lo + hi) / 2.0, hi] {
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{v:.2}</text>",
            left - 4.0,
            y_of(v) + 3.0
        );
    }

    // quantile bands: pair level i with level Q-1-i, outermost first
    for (n, d) in days.iter().enumerate() {
        let rows = &fans[&key(d)];
        let q = rows.len();
        for i in 0..q / 2 {
            let (lower, upper) = (&rows[i].1, &rows[q - 1 - i].1);
            let mut pts: Vec<String> = (0..dim).map(|t| format!("{:.2},{:.2}", x_of(n * dim + t), y_of(upper[t]))).collect();
            pts.extend((0..dim).rev().map(|t| format!("{:.2},{:.2}", x_of(n * dim + t), y_of(lower[t]))));
            let _ = writeln!(
                s,
                "<polygon fill=\"#2b6cb0\" fill-opacity=\"0.15\" stroke=\"none\" points=\"{}\"/>",
                pts.join(" ")
            );
        }
        if n > 0 {
            let x = x_of(n * dim) - 0.5 * plot_w / steps as f64;
            let _ = writeln!(
                s,
                "<line x1=\"{x:.2}\" y1=\"{top}\" x2=\"{x:.2}\" y2=\"{}\" stroke=\"#ddd\"/>",
                top + plot_h
            );
        }
    }
    let series = |rows: Option<&Rows>| -> Vec<Vec<(f64, f64)>> {
        days.iter()
            .enumerate()
            .filter_map(|(n, d)| {
                rows.and_then(|r| r.get(&key(d))).map(|v| {
                    v[0].1.iter().enumerate().map(|(t, y)| (x_of(n * dim + t), y_of(*y))).collect()
                })
            })
            .collect()
    };
    for line in series(best) {
        s.push_str(&polyline(&line, "stroke=\"#dd6b20\" stroke-width=\"1.2\" stroke-dasharray=\"4 2\""));
    }
    for line in series(truths) {
        s.push_str(&polyline(&line, "stroke=\"black\" stroke-width=\"1.5\""));
    }
    let ly = top + plot_h + 20.0;
    let _ = writeln!(
        s,
        "<text x=\"{left}\" y=\"{ly}\" font-family=\"sans-serif\" font-size=\"11\">shaded: quantile intervals; black: observed; dashed: closest ensemble member</text>"
    );

    if let Some(bands) = bands {
        let y0 = top + plot_h + 50.0;
        let rows: Vec<Option<&Vec<(String, Vec<f64>)>>> = days.iter().map(|d| bands.get(&key(d))).collect();
        let n_rows = rows.iter().flatten().map(|r| r.len()).max().unwrap_or(0);
        let max_abs = rows
            .iter()
            .flatten()
            .flat_map(|r| r.iter().flat_map(|(_, v)| v.iter()))
            .filter(|v| v.is_finite())
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-12);
        let cell_w = plot_w / steps as f64;
        let cell_h = band_h / n_rows.max(1) as f64;
        let _ = writeln!(
            s,
            "<text x=\"{left}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\">covariance band of the best-fitting component</text>",
            y0 - 6.0
        );
        for (n, r) in rows.iter().enumerate() {
            for (i, (_, vals)) in r.iter().flat_map(|v| v.iter()).enumerate() {
                for (t, v) in vals.iter().enumerate() {
                    if !v.is_finite() {
                        continue;
                    }
                    let a = v / max_abs;
                    let color = if a >= 0.0 { "#c53030" } else { "#2b6cb0" };
                    let _ = writeln!(
                        s,
                        "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{color}\" fill-opacity=\"{:.3}\"/>",
                        left + (n * dim + t) as f64 * cell_w,
                        y0 + i as f64 * cell_h,
                        cell_w,
                        cell_h,
                        a.abs()
                    );
                }
            }
        }
    }
    s.push_str("</svg>\n");
    s
}
