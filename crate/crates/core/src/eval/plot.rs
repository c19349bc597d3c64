//! Per-language bar chart as a standalone SVG.

use std::fmt::Write as _;

use super::EvalReport;

const BAR: f64 = 36.0;
const GAP: f64 = 12.0;
const HEIGHT: f64 = 220.0;
const MARGIN: f64 = 40.0;

pub fn bar_chart_svg(report: &EvalReport) -> String {
    let bars: Vec<(&str, f64)> = report.per_language.iter().map(|(l, s)| (l.as_str(), *s)).collect();
    let max = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(1e-12);
    let width = MARGIN * 2.0 + bars.len() as f64 * (BAR + GAP);
    let total_h = HEIGHT + MARGIN * 2.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{total_h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN}" y="20" font-size="13">{} ({:?})</text>"#,
        report.task, report.metric
    );
    let base = MARGIN + HEIGHT;
    let _ = writeln!(
        svg,
        r##"<line x1="{MARGIN}" y1="{base}" x2="{}" y2="{base}" stroke="#333"/>"##,
        width - MARGIN
    );
    for (i, (lang, score)) in bars.iter().enumerate() {
        let x = MARGIN + i as f64 * (BAR + GAP) + GAP / 2.0;
        let h = HEIGHT * score / max;
        let fill = if *lang == "en" { "#8c8c8c" } else { "#3b6ea5" };
        let _ = writeln!(
            svg,
            r#"<rect x="{x:.1}" y="{:.1}" width="{BAR}" height="{h:.1}" fill="{fill}"/>"#,
            base - h
        );
        let cx = x + BAR / 2.0;
        let _ = writeln!(
            svg,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{lang}</text>"#,
            base + 14.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{:.1}</text>"#,
            base - h - 4.0,
            score * 100.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}
