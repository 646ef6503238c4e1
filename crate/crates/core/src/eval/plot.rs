//! Plain SVG output: accuracy bars per report and attention heatmaps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::experiment::ExperimentReport;
use crate::error::{CoolError, Result};
use crate::extraction::AttentionExport;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Accuracy and macro-F1 bars (mean with a ±std whisker) for each report.
pub fn bar_chart_svg(reports: &[ExperimentReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(CoolError::Empty("no reports to plot".into()));
    }
    let (left, top, plot_h, group_w, bar_w) = (60.0, 30.0, 240.0, 90.0, 30.0);
    let width = left + group_w * reports.len() as f64 + 20.0;
    let height = top + plot_h + 90.0;
    let y = |v: f64| top + plot_h * (1.0 - v.clamp(0.0, 1.0));
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        writeln!(
            s,
            r##"<line x1="{left}" y1="{yy:.1}" x2="{x2:.0}" y2="{yy:.1}" stroke="#ddd"/><text x="{tx}" y="{ty:.1}" text-anchor="end">{v:.1}</text>"##,
            yy = y(v),
            x2 = width - 20.0,
            tx = left - 6.0,
            ty = y(v) + 4.0
        )
        .unwrap();
    }
    for (i, r) in reports.iter().enumerate() {
        let x0 = left + group_w * i as f64 + (group_w - 2.0 * bar_w) / 2.0;
        let bars = r.aggregate.map(|a| {
            [
                (a.accuracy_mean, a.accuracy_std, "#4c72b0"),
                (a.macro_f1_mean, a.macro_f1_std, "#dd8452"),
            ]
        });
        for (j, (mean, std, color)) in bars.into_iter().flatten().enumerate() {
            let x = x0 + bar_w * j as f64;
            writeln!(
                s,
                r#"<rect x="{x:.1}" y="{yt:.1}" width="{bw:.1}" height="{h:.1}" fill="{color}"/>"#,
                yt = y(mean),
                bw = bar_w - 2.0,
                h = y(0.0) - y(mean)
            )
            .unwrap();
            let cx = x + (bar_w - 2.0) / 2.0;
            writeln!(
                s,
                r#"<line x1="{cx:.1}" y1="{a:.1}" x2="{cx:.1}" y2="{b:.1}" stroke="black"/>"#,
                a = y(mean + std),
                b = y(mean - std)
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<text x="{tx:.1}" y="{ty:.1}" text-anchor="end" transform="rotate(-35 {tx:.1} {ty:.1})">{label}</text>"#,
            tx = x0 + bar_w,
            ty = y(0.0) + 14.0,
            label = escape(&r.label())
        )
        .unwrap();
    }
    writeln!(
        s,
        r##"<rect x="{left}" y="6" width="10" height="10" fill="#4c72b0"/><text x="{a}" y="15">accuracy</text><rect x="{b}" y="6" width="10" height="10" fill="#dd8452"/><text x="{c}" y="15">macro-F1</text>"##,
        a = left + 14.0,
        b = left + 80.0,
        c = left + 94.0
    )
    .unwrap();
    s.push_str("</svg>\n");
    Ok(s)
}

/// `2 × n` matrix: positive weights in row 0, negative weights in row 1.
pub fn heatmap_matrix(export: &AttentionExport) -> Array2<f64> {
    let n = export.entities.len();
    Array2::from_shape_fn((2, n), |(r, c)| {
        let e = &export.entities[c];
        if r == 0 {
            e.pos_weight
        } else {
            e.neg_weight
        }
    })
}

pub fn heatmap_svg(export: &AttentionExport) -> Result<String> {
    let m = heatmap_matrix(export);
    if m.ncols() == 0 {
        return Err(CoolError::Empty(format!("{} has no entities", export.news_id)));
    }
    let (left, top, cell) = (50.0, 30.0, 48.0);
    let width = left + cell * m.ncols() as f64 + 20.0;
    let height = top + 2.0 * cell + 80.0;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{left}" y="16">{}</text>"#, escape(&export.news_id)).unwrap();
    for (r, name) in ["pos", "neg"].iter().enumerate() {
        writeln!(
            s,
            r#"<text x="{x}" y="{yy:.1}" text-anchor="end">{name}</text>"#,
            x = left - 6.0,
            yy = top + cell * r as f64 + cell / 2.0 + 4.0
        )
        .unwrap();
        for c in 0..m.ncols() {
            let v = m[[r, c]].clamp(0.0, 1.0);
            let shade = (255.0 * (1.0 - v)).round() as u8;
            writeln!(
                s,
                r#"<rect x="{x:.1}" y="{yy:.1}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="white"/><text x="{tx:.1}" y="{ty:.1}" text-anchor="middle">{v:.2}</text>"#,
                x = left + cell * c as f64,
                yy = top + cell * r as f64,
                tx = left + cell * c as f64 + cell / 2.0,
                ty = top + cell * r as f64 + cell / 2.0 + 4.0
            )
            .unwrap();
        }
    }
    for (c, e) in export.entities.iter().enumerate() {
        let tx = left + cell * c as f64 + cell / 2.0;
        let ty = top + 2.0 * cell + 14.0;
        writeln!(
            s,
            r#"<text x="{tx:.1}" y="{ty:.1}" text-anchor="end" transform="rotate(-35 {tx:.1} {ty:.1})">{}</text>"#,
            escape(&e.entity_name)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes `accuracy.svg` plus one `attention_<news_id>.svg` per export.
/// Exports without entities are skipped.
pub fn emit_plots(reports: &[ExperimentReport], exports: &[AttentionExport], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let bars = bar_chart_svg(reports)?;
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let path = out_dir.join("accuracy.svg");
    std::fs::write(&path, bars)?;
    written.push(path);
    for e in exports.iter().filter(|e| !e.entities.is_empty()) {
        let path = out_dir.join(format!("attention_{}.svg", file_safe(&e.news_id)));
        std::fs::write(&path, heatmap_svg(e)?)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::experiment::{Aggregate, ExperimentReport};
    use crate::eval::ExperimentConfig;
    use crate::extraction::EntityWeights;

    fn report() -> ExperimentReport {
        let cfg = ExperimentConfig::from_toml_str("[data]\nsource=\"a\"\ntarget=\"b\"\nsnapshot=\"c\"\n", Path::new("/x")).unwrap();
        let mut r = ExperimentReport::from_seeds(&cfg, "f".into(), vec![]);
        r.aggregate = Some(Aggregate {
            accuracy_mean: 0.8,
            accuracy_std: 0.05,
            macro_f1_mean: 0.75,
            macro_f1_std: 0.1,
            completed: 2,
        });
        r
    }

    fn export(n: usize) -> AttentionExport {
        AttentionExport {
            news_id: "n/1".into(),
            entities: (0..n)
                .map(|i| EntityWeights {
                    entity_id: format!("Q{i}"),
                    entity_name: format!("e<{i}>"),
                    pos_weight: 1.0 / n as f64,
                    neg_weight: (i + 1) as f64 / (n * (n + 1) / 2) as f64,
                })
                .collect(),
        }
    }

    #[test]
    fn one_report_one_chart() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_plots(&[report()], &[], dir.path()).unwrap();
        assert_eq!(files.len(), 1);
        let svg = std::fs::read_to_string(&files[0]).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(emit_plots(&[report()], &[], dir.path()).unwrap(), files);
        assert_eq!(std::fs::read_to_string(&files[0]).unwrap(), svg);
    }

    #[test]
    fn heatmap_shape_and_escaping() {
        let e = export(5);
        assert_eq!(heatmap_matrix(&e).dim(), (2, 5));
        let svg = heatmap_svg(&e).unwrap();
        assert_eq!(svg.matches("<rect x=").count(), 10);
        assert!(svg.contains("e&lt;3&gt;"));
        let dir = tempfile::tempdir().unwrap();
        let files = emit_plots(&[report()], &[e, export(0)], dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        assert!(files[1].ends_with("attention_n_1.svg"));
    }

    #[test]
    fn empty_inputs_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_plots(&[], &[], dir.path()).is_err());
        assert!(heatmap_svg(&export(0)).is_err());
    }
}
