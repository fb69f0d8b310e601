//! PR and F-measure curves as SVG, with CSV sidecars holding the plotted values.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use gcpa_core::metrics::{read_report, MetricsReport};

use crate::status::{CliError, CliResult, Status};

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

pub struct PlotFiles {
    pub pr_svg: PathBuf,
    pub f_svg: PathBuf,
    pub pr_csv: PathBuf,
    pub f_csv: PathBuf,
}

pub fn cmd_plot(reports: &[PathBuf], output: &Path) -> CliResult<Status> {
    if reports.is_empty() {
        return Err(CliError::usage("plot needs at least one report"));
    }
    let mut loaded = Vec::with_capacity(reports.len());
    for path in reports {
        if !path.is_file() {
            return Err(CliError::usage(format!("report not found: {}", path.display())));
        }
        loaded.push(read_report(path)?);
    }
    let names = legend_names(&loaded, reports);
    let files = write_plots(&loaded, &names, output)?;
    log::info!("wrote {} and {}", files.pr_svg.display(), files.f_svg.display());
    Ok(Status::Success)
}

/// Dataset names, disambiguated by file stem when two reports share one.
pub fn legend_names(reports: &[MetricsReport], paths: &[PathBuf]) -> Vec<String> {
    reports
        .iter()
        .zip(paths)
        .map(|(r, p)| {
            let clash = reports.iter().filter(|o| o.dataset == r.dataset).count() > 1;
            if clash {
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                format!("{} ({stem})", r.dataset)
            } else {
                r.dataset.clone()
            }
        })
        .collect()
}

pub fn write_plots(reports: &[MetricsReport], names: &[String], output: &Path) -> CliResult<PlotFiles> {
    std::fs::create_dir_all(output).map_err(|e| CliError::io(output, e))?;
    let files = PlotFiles {
        pr_svg: output.join("pr_curves.svg"),
        f_svg: output.join("f_curves.svg"),
        pr_csv: output.join("pr_curves.csv"),
        f_csv: output.join("f_curves.csv"),
    };

    let pr: Vec<Series> = reports
        .iter()
        .zip(names)
        .map(|(r, n)| Series {
            name: n.clone(),
            points: r.pr.recall.iter().copied().zip(r.pr.precision.iter().copied()).collect(),
        })
        .collect();
    let f: Vec<Series> = reports
        .iter()
        .zip(names)
        .map(|(r, n)| Series {
            name: n.clone(),
            points: r.pr.thresholds.iter().map(|&t| f64::from(t)).zip(r.f_curve.iter().copied()).collect(),
        })
        .collect();
    let pr_svg = line_chart("Precision-recall", "Recall", "Precision", (0.0, 1.0), &pr);
    let f_svg = line_chart("F-measure", "Threshold", "F-measure", (0.0, 255.0), &f);

    let mut pr_csv = String::from("threshold");
    let mut f_csv = String::from("threshold");
    for n in names {
        let n = csv_field(n);
        let _ = write!(pr_csv, ",{n} precision,{n} recall");
        let _ = write!(f_csv, ",{n}");
    }
    pr_csv.push('\n');
    f_csv.push('\n');
    let thresholds = &reports[0].pr.thresholds;
    for (i, t) in thresholds.iter().enumerate() {
        let _ = write!(pr_csv, "{t}");
        let _ = write!(f_csv, "{t}");
        for r in reports {
            let _ = write!(pr_csv, ",{},{}", r.pr.precision[i], r.pr.recall[i]);
            let _ = write!(f_csv, ",{}", r.f_curve[i]);
        }
        pr_csv.push('\n');
        f_csv.push('\n');
    }

    for (path, text) in [
        (&files.pr_svg, &pr_svg),
        (&files.f_svg, &f_svg),
        (&files.pr_csv, &pr_csv),
        (&files.f_csv, &f_csv),
    ] {
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))?;
    }
    Ok(files)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

/// A plain line chart with a unit y range and a legend in the lower left.
fn line_chart(title: &str, x_label: &str, y_label: &str, x_range: (f64, f64), series: &[Series]) -> String {
    let (w, h) = (480.0, 400.0);
    let (left, right, top, bottom) = (60.0, 20.0, 36.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x_range.0) / (x_range.1 - x_range.0) * pw;
    let sy = |y: f64| top + (1.0 - y) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        xml_escape(title)
    );
    for i in 0..=5 {
        let f = f64::from(i) / 5.0;
        let gy = sy(f);
        let xv = x_range.0 + f * (x_range.1 - x_range.0);
        let gx = sx(xv);
        let _ = writeln!(
            svg,
            r##"<line x1="{left}" y1="{gy:.1}" x2="{:.1}" y2="{gy:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{f:.1}</text>"##,
            left + pw,
            left - 6.0,
            gy + 4.0
        );
        let label = if x_range.1 > 1.0 { format!("{xv:.0}") } else { format!("{xv:.1}") };
        let _ = writeln!(
            svg,
            r##"<line x1="{gx:.1}" y1="{top}" x2="{gx:.1}" y2="{:.1}" stroke="#ddd"/><text x="{gx:.1}" y="{:.1}" text-anchor="middle">{label}</text>"##,
            top + ph,
            top + ph + 16.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 12.0,
        xml_escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        xml_escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y.clamp(0.0, 1.0))))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + ph - 12.0 - 16.0 * (series.len() - 1 - i) as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{colour}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            left + 10.0,
            left + 30.0,
            left + 36.0,
            ly + 4.0,
            xml_escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
