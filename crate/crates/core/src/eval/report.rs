//! CSV and SVG renderings of an [`EvalReport`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::suite::{EvalReport, SuiteCell};
use super::EvalError;
use crate::provenance::Provenance;

pub const REPORT_COLUMNS: [&str; 8] = ["model", "horizon", "auc_mean", "auc_std", "cap20_mean", "cap20_std", "cap40_mean", "cap40_std"];

fn write(path: &Path, body: String) -> Result<PathBuf, EvalError> {
    std::fs::write(path, body).map_err(|source| EvalError::Io { path: path.to_path_buf(), source })?;
    Ok(path.to_path_buf())
}

pub fn report_csv(report: &EvalReport, provenance: &Provenance) -> String {
    let mut out = provenance.comment_line();
    out.push_str(&REPORT_COLUMNS.join(","));
    out.push('\n');
    for c in &report.cells {
        let s = c.summary();
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            c.family, c.horizon, s.auc_mean, s.auc_std, s.cap20_mean, s.cap20_std, s.cap40_mean, s.cap40_std
        );
    }
    out
}

fn padding_name(c: &SuiteCell) -> String {
    c.padding.map(|p| p.to_string()).unwrap_or_default()
}

pub fn folds_csv(report: &EvalReport, provenance: &Provenance) -> String {
    let mut out = provenance.comment_line();
    out.push_str("model,horizon,padding,fold,auc,cap20,cap40,n_test,n_train_balanced,params\n");
    for c in report.cells.iter().chain(&report.ablation) {
        for (f, params) in c.folds.iter().zip(&c.chosen) {
            let params = serde_json::to_string(params).expect("hyperparameters serialize").replace('"', "\"\"");
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{:.6},{:.6},{},{},\"{params}\"",
                c.family,
                c.horizon,
                padding_name(c),
                f.fold,
                f.auc,
                f.cap20,
                f.cap40,
                f.n_test,
                f.n_train_balanced
            );
        }
    }
    out
}

fn curve_csv(report: &EvalReport, provenance: &Provenance, header: &str, points: fn(&SuiteCell) -> &[(f64, f64)]) -> String {
    let mut out = provenance.comment_line();
    out.push_str(header);
    out.push('\n');
    for c in &report.cells {
        for (x, y) in points(c) {
            let _ = writeln!(out, "{},{},{x:.6},{y:.6}", c.family, c.horizon);
        }
    }
    out
}

pub fn roc_csv(report: &EvalReport, provenance: &Provenance) -> String {
    curve_csv(report, provenance, "model,horizon,false_positive_rate,true_positive_rate", |c| &c.roc)
}

pub fn cap_csv(report: &EvalReport, provenance: &Provenance) -> String {
    curve_csv(report, provenance, "model,horizon,population_fraction,captured_fraction", |c| &c.cap)
}

pub fn padding_csv(report: &EvalReport, provenance: &Provenance) -> String {
    let mut out = provenance.comment_line();
    out.push_str("horizon,zero_auc_mean,first_auc_mean,auc_delta,zero_cap20_mean,first_cap20_mean,zero_cap40_mean,first_cap40_mean\n");
    for r in report.padding_rows() {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.horizon,
            r.zero.auc_mean,
            r.first.auc_mean,
            r.auc_delta(),
            r.zero.cap20_mean,
            r.first.cap20_mean,
            r.zero.cap40_mean,
            r.first.cap40_mean
        );
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// A unit-square line chart, one polyline per cell, with the diagonal as
/// the random-ranking reference.
pub fn curve_svg(title: &str, x_label: &str, y_label: &str, cells: &[&SuiteCell], points: fn(&SuiteCell) -> &[(f64, f64)], provenance: &Provenance) -> String {
    let (w, h, m) = (480.0, 480.0, 56.0);
    let plot = w - 2.0 * m;
    let px = |x: f64| m + x * plot;
    let py = |y: f64| h - m - y * plot;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    s.push_str(&provenance.xml_comment());
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{title}</text>"#, w / 2.0);
    let _ = writeln!(s, r##"<rect x="{m}" y="{m}" width="{plot}" height="{plot}" fill="none" stroke="#444"/>"##);
    for i in 0..=5 {
        let t = f64::from(i) / 5.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{t:.1}</text>"#, px(t), h - m + 16.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{t:.1}</text>"#, m - 6.0, py(t) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, w / 2.0, h - 14.0);
    let _ = writeln!(s, r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{y_label}</text>"#, h / 2.0, h / 2.0);
    let _ = writeln!(s, r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#999" stroke-dasharray="4 4"/>"##, px(0.0), py(0.0), px(1.0), py(1.0));
    for (i, c) in cells.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = points(c).iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        let ly = m + 16.0 + 16.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, w - m - 110.0, w - m - 90.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{} ({:.3})</text>"#, w - m - 85.0, ly + 4.0, c.family, c.summary().auc_mean);
    }
    s.push_str("</svg>\n");
    s
}

/// Writes report.csv, folds.csv, roc.csv, cap.csv, padding_ablation.csv
/// (when the ablation ran) and, if asked, one ROC and one CAP chart per
/// horizon. Returns the written paths.
pub fn write_report(report: &EvalReport, dir: &Path, provenance: &Provenance, svg: bool) -> Result<Vec<PathBuf>, EvalError> {
    std::fs::create_dir_all(dir).map_err(|source| EvalError::Io { path: dir.to_path_buf(), source })?;
    let mut written = vec![
        write(&dir.join("report.csv"), report_csv(report, provenance))?,
        write(&dir.join("folds.csv"), folds_csv(report, provenance))?,
        write(&dir.join("roc.csv"), roc_csv(report, provenance))?,
        write(&dir.join("cap.csv"), cap_csv(report, provenance))?,
    ];
    if !report.ablation.is_empty() {
        written.push(write(&dir.join("padding_ablation.csv"), padding_csv(report, provenance))?);
    }
    if svg {
        let mut horizons: Vec<i64> = report.cells.iter().map(|c| c.horizon).collect();
        horizons.sort_unstable();
        horizons.dedup();
        for h in horizons {
            let cells: Vec<&SuiteCell> = report.cells.iter().filter(|c| c.horizon == h).collect();
            let roc = curve_svg(&format!("ROC, {h}-day horizon"), "false positive rate", "true positive rate", &cells, |c| &c.roc, provenance);
            written.push(write(&dir.join(format!("roc_{h}.svg")), roc)?);
            let cap = curve_svg(&format!("CAP, {h}-day horizon"), "population fraction", "captured positives", &cells, |c| &c.cap, provenance);
            written.push(write(&dir.join(format!("cap_{h}.svg")), cap)?);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::suite::FoldResult;
    use crate::features::Padding;
    use crate::learners::{Family, Hyperparameters};

    fn cell(family: Family, horizon: i64, padding: Option<Padding>, auc: f64) -> SuiteCell {
        let folds = (0..2)
            .map(|f| FoldResult { fold: f, auc: auc + 0.01 * f as f64, cap20: 0.4, cap40: 0.6, n_test: 10, n_train_balanced: 8 })
            .collect();
        SuiteCell {
            family,
            horizon,
            padding,
            folds,
            chosen: vec![Hyperparameters::default_for(family); 2],
            roc: vec![(0.0, 0.0), (0.5, 0.7), (1.0, 1.0)],
            cap: vec![(0.0, 0.0), (0.2, 0.4), (1.0, 1.0)],
        }
    }

    fn sample_report() -> EvalReport {
        let mut cells = Vec::new();
        for f in Family::ALL {
            for h in [90, 180, 360] {
                cells.push(cell(f, h, f.is_sequence().then_some(Padding::ZeroFill), 0.7));
            }
        }
        let ablation = [90, 180, 360].map(|h| cell(Family::LstmHybrid, h, Some(Padding::FirstDuplicate), 0.72)).to_vec();
        EvalReport { seed: 1, cells, ablation }
    }

    #[test]
    fn report_has_fifteen_rows_and_fixed_columns() {
        let text = report_csv(&sample_report(), &Provenance::unconfigured(1));
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# adherence"));
        assert_eq!(lines[1], REPORT_COLUMNS.join(","));
        assert_eq!(lines.len(), 17);
        assert_eq!(lines[2], "logistic,90,0.705000,0.007071,0.400000,0.000000,0.600000,0.000000");
    }

    #[test]
    fn padding_delta_is_first_minus_zero() {
        let rows = sample_report().padding_rows();
        assert_eq!(rows.len(), 3);
        assert!((rows[0].auc_delta() - 0.02).abs() < 1e-12);
        let text = padding_csv(&sample_report(), &Provenance::unconfigured(1));
        assert!(text.lines().nth(2).unwrap().starts_with("90,0.705000,0.725000,0.020000"));
    }

    #[test]
    fn svg_is_self_contained() {
        let r = sample_report();
        let cells: Vec<&SuiteCell> = r.cells.iter().filter(|c| c.horizon == 90).collect();
        let svg = curve_svg("ROC", "x", "y", &cells, |c| &c.roc, &Provenance::unconfigured(1));
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 5);
        assert!(svg.contains("<!-- adherence"));
    }

    #[test]
    fn writes_all_files() {
        let dir = tempfile::tempdir().unwrap();
        let files = write_report(&sample_report(), dir.path(), &Provenance::unconfigured(1), true).unwrap();
        let names: Vec<String> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        for n in ["report.csv", "folds.csv", "roc.csv", "cap.csv", "padding_ablation.csv", "roc_90.svg", "cap_360.svg"] {
            assert!(names.iter().any(|x| x == n), "{n} missing from {names:?}");
        }
    }
}
