//! Minimal hand-written SVG charts for training curves and sweep drift.

use std::fmt::Write as _;

use crate::experiment::SweepRow;
use crate::trainer::TrainingLog;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, y_max: f64, x_label: &str, y_label: &str) {
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN / 2.0, MARGIN / 1.5);
    let _ = writeln!(
        out,
        r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#
    );
    let _ = writeln!(
        out,
        r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#
    );
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = y0 - (y0 - y1) * i as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#,
            x0 - 4.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
}

fn nice_max(values: impl Iterator<Item = f64>) -> f64 {
    let m = values.filter(|v| v.is_finite()).fold(0.0_f64, f64::max);
    if m > 0.0 {
        m * 1.05
    } else {
        1.0
    }
}

/// Line chart of training (and validation, if present) losses over steps.
pub fn loss_curves_svg(log: &TrainingLog, title: &str) -> String {
    let mut series: Vec<(String, Vec<(f64, f64)>)> = vec![
        (
            "train seq".into(),
            log.steps
                .iter()
                .map(|r| (r.step as f64, r.seq_loss))
                .collect(),
        ),
        (
            "train semantic".into(),
            log.steps
                .iter()
                .map(|r| (r.step as f64, r.semantic_loss))
                .collect(),
        ),
    ];
    if !log.evals.is_empty() {
        series.push((
            "valid seq".into(),
            log.evals
                .iter()
                .map(|r| (r.step as f64, r.seq_loss))
                .collect(),
        ));
        series.push((
            "valid semantic".into(),
            log.evals
                .iter()
                .map(|r| (r.step as f64, r.semantic_loss))
                .collect(),
        ));
    }
    let x_max = log.steps.last().map_or(1.0, |r| (r.step as f64).max(1.0));
    let y_max = nice_max(series.iter().flat_map(|(_, p)| p.iter().map(|&(_, y)| y)));

    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, y_max, "step", "loss");
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN / 2.0, MARGIN / 1.5);
    for (i, (name, points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = points
            .iter()
            .filter(|(_, y)| y.is_finite())
            .map(|&(x, y)| {
                format!(
                    "{:.2},{:.2}",
                    x0 + (x1 - x0) * x / x_max,
                    y0 - (y0 - y1) * (y / y_max).min(1.0)
                )
            })
            .collect();
        if !path.is_empty() {
            let _ = writeln!(
                out,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                path.join(" ")
            );
        }
        let ly = 40.0 + 16.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
            x1 - 120.0,
            ly - 9.0,
            x1 - 106.0,
            ly,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Bar chart of encoder drift per sweep run; failed runs are drawn as empty slots.
pub fn drift_bars_svg(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    header(&mut out, "encoder drift by semantic weight");
    let y_max = nice_max(rows.iter().filter_map(|r| r.drift));
    axes(&mut out, y_max, "run (kind, lambda)", "drift");
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN / 2.0, MARGIN / 1.5);
    let mut kinds: Vec<_> = rows.iter().map(|r| r.kind).collect();
    kinds.dedup();
    let slot = (x1 - x0) / rows.len().max(1) as f64;
    for (i, r) in rows.iter().enumerate() {
        let color = COLORS[kinds.iter().position(|k| *k == r.kind).unwrap_or(0) % COLORS.len()];
        let x = x0 + slot * i as f64 + slot * 0.15;
        if let Some(d) = r.drift.filter(|d| d.is_finite()) {
            let h = (y0 - y1) * (d / y_max).min(1.0);
            let _ = writeln!(
                out,
                r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="{color}"/>"#,
                y0 - h,
                slot * 0.7
            );
        } else {
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" fill="red">x</text>"#,
                x + slot * 0.35,
                y0 - 4.0
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="10">{} {}</text>"#,
            x + slot * 0.35,
            y0 + 14.0,
            r.kind,
            r.lambda
        );
    }
    out.push_str("</svg>\n");
    out
}
