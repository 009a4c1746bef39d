use std::fmt::Write as _;

use super::EvaluationReport;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 40.0;

/// Static bar chart, one bar per ROI row, with a zero axis in the middle so
/// negative medians render downward.
pub fn report_svg(report: &EvaluationReport) -> String {
    let n = report.rows.len().max(1) as f64;
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let zero = MARGIN + plot_h / 2.0;
    let slot = plot_w / n;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{MARGIN}" y="20" font-family="sans-serif" font-size="13">{} {} fold {} ({})</text>"#,
        report.subject, report.hemisphere, report.fold, report.run_id
    )
    .unwrap();
    writeln!(
        s,
        r##"<line x1="{MARGIN}" y1="{zero}" x2="{}" y2="{zero}" stroke="#333"/>"##,
        WIDTH - MARGIN
    )
    .unwrap();
    for (i, row) in report.rows.iter().enumerate() {
        let v = if row.median_r.is_finite() {
            row.median_r.clamp(-1.0, 1.0)
        } else {
            0.0
        };
        let h = v.abs() * plot_h / 2.0;
        let x = MARGIN + i as f64 * slot + slot * 0.15;
        let y = if v >= 0.0 { zero - h } else { zero };
        writeln!(
            s,
            r##"<rect x="{x:.1}" y="{y:.1}" width="{:.1}" height="{h:.1}" fill="#4c72b0"><title>{}: {:.4}</title></rect>"##,
            slot * 0.7,
            row.roi,
            row.median_r
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.1}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#,
            x + slot * 0.35,
            HEIGHT - MARGIN / 2.0,
            row.roi
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Hemisphere, RoiAtlas};

    #[test]
    fn one_bar_per_row() {
        let atlas = RoiAtlas::even_split(7);
        let r = [0.1, -0.2, 0.3, 0.4, 0.5, 0.6, f64::NAN];
        let rep = EvaluationReport::new("s", Hemisphere::Lh, 0, "x", "", &r, &atlas).unwrap();
        let svg = report_svg(&rep);
        assert_eq!(svg.matches("<rect").count(), 8);
        assert!(svg.ends_with("</svg>\n"));
    }
}
