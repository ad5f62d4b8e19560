//! Minimal SVG writers for heatmaps, scatter plots and ROC curves.
//! Numbers are printed at fixed precision so output is byte-stable.

use std::fmt::Write;

use crate::invariance::{InvarianceMap, DISPLAY_P_FLOOR};

const CELL_W: f64 = 10.0;
const CELL_H: f64 = 3.0;
const MARGIN: f64 = 40.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

pub(crate) fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// White at p = 1 to dark red at p <= 1e-16, on a -log10 scale.
fn heat_color(p: f64) -> String {
    let level = (-p.max(DISPLAY_P_FLOOR).log10()).clamp(0.0, 16.0) / 16.0;
    let lerp = |from: f64, to: f64| (from + (to - from) * level).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        lerp(255.0, 165.0),
        lerp(255.0, 0.0),
        lerp(255.0, 38.0)
    )
}

pub fn heatmap_svg(map: &InvarianceMap) -> String {
    let cols = map.identity_count();
    let width = 2.0 * MARGIN + cols as f64 * CELL_W;
    let height = 2.0 * MARGIN + map.feature_count as f64 * CELL_H + 60.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN:.0}" y="20" font-size="12" font-family="sans-serif">features x identities, -log10(p); outlined: p &lt; {:.3e}</text>"#,
        map.alpha_corrected
    );
    for f in 0..map.feature_count {
        for i in 0..cols {
            let x = MARGIN + i as f64 * CELL_W;
            let y = MARGIN + f as f64 * CELL_H;
            let fill = heat_color(map.p_value(f, i));
            if map.is_significant(f, i) {
                let _ = writeln!(
                    s,
                    r##"<rect class="cell sig" x="{x:.1}" y="{y:.1}" width="{CELL_W:.1}" height="{CELL_H:.1}" fill="{fill}" stroke="#000000" stroke-width="0.3"/>"##
                );
            } else {
                let _ = writeln!(
                    s,
                    r#"<rect class="cell" x="{x:.1}" y="{y:.1}" width="{CELL_W:.1}" height="{CELL_H:.1}" fill="{fill}"/>"#
                );
            }
        }
    }
    let label_y = MARGIN + map.feature_count as f64 * CELL_H + 6.0;
    for (i, id) in map.identities.iter().enumerate() {
        let x = MARGIN + (i as f64 + 0.7) * CELL_W;
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{label_y:.1}" font-size="7" font-family="sans-serif" transform="rotate(90 {x:.1} {label_y:.1})">{}</text>"#,
            escape(id)
        );
    }
    s.push_str("</svg>\n");
    s
}

struct Frame {
    min: [f64; 2],
    span: [f64; 2],
    size: f64,
}

impl Frame {
    fn fit(points: impl Iterator<Item = [f64; 2]>, size: f64) -> Frame {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in points {
            for k in 0..2 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        let span = [0, 1].map(|k| {
            let s = max[k] - min[k];
            if s > 0.0 && s.is_finite() {
                s
            } else {
                1.0
            }
        });
        let min = min.map(|m| if m.is_finite() { m } else { 0.0 });
        Frame { min, span, size }
    }

    fn place(&self, p: [f64; 2]) -> (f64, f64) {
        (
            MARGIN + (p[0] - self.min[0]) / self.span[0] * self.size,
            MARGIN + self.size - (p[1] - self.min[1]) / self.span[1] * self.size,
        )
    }
}

/// Scatter plot with one color per distinct class label (labels sorted).
pub fn scatter_svg(points: &[[f64; 2]], classes: &[String], title: &str) -> String {
    let size = 600.0;
    let frame = Frame::fit(points.iter().copied(), size);
    let mut labels: Vec<&str> = classes.iter().map(String::as_str).collect();
    labels.sort_unstable();
    labels.dedup();
    let color_of = |c: &str| {
        let k = labels.binary_search(&c).unwrap_or(0);
        PALETTE[k % PALETTE.len()]
    };

    let total = size + 2.0 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{total:.0}" viewBox="0 0 {:.0} {total:.0}">"#,
        total + 160.0,
        total + 160.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN:.0}" y="20" font-size="12" font-family="sans-serif">{}</text>"#,
        escape(title)
    );
    for (p, c) in points.iter().zip(classes) {
        let (x, y) = frame.place(*p);
        let _ = writeln!(
            s,
            r#"<circle class="pt" cx="{x:.2}" cy="{y:.2}" r="2" fill="{}" fill-opacity="0.7"/>"#,
            color_of(c)
        );
    }
    for (k, label) in labels.iter().enumerate().take(30) {
        let y = MARGIN + 14.0 * k as f64;
        let x = total + 10.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.0}" y="{:.0}" width="8" height="8" fill="{}"/><text x="{:.0}" y="{y:.0}" font-size="10" font-family="sans-serif">{}</text>"#,
            y - 8.0,
            PALETTE[k % PALETTE.len()],
            x + 12.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// ROC curves (FAR on x, TAR on y) on the unit square.
pub fn roc_svg(curves: &[(&str, &[(f64, f64)])]) -> String {
    let size = 400.0;
    let frame = Frame {
        min: [0.0, 0.0],
        span: [1.0, 1.0],
        size,
    };
    let total = size + 2.0 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total:.0}" height="{total:.0}" viewBox="0 0 {total:.0} {total:.0}">"#
    );
    let _ = writeln!(
        s,
        r##"<rect x="{MARGIN:.0}" y="{MARGIN:.0}" width="{size:.0}" height="{size:.0}" fill="none" stroke="#000000"/>"##
    );
    for (k, (label, points)) in curves.iter().enumerate() {
        let mut path = String::new();
        for (j, &(far, tar)) in points.iter().enumerate() {
            let (x, y) = frame.place([far, tar]);
            let _ = write!(path, "{}{x:.2},{y:.2}", if j == 0 { "M" } else { " L" });
        }
        let color = PALETTE[k % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<path class="roc" d="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.0}" y="{:.0}" font-size="11" font-family="sans-serif" fill="{color}">{}</text>"#,
            MARGIN + 10.0,
            MARGIN + 16.0 * (k as f64 + 1.0),
            escape(label)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.0}" y="{:.0}" font-size="11" font-family="sans-serif">false accept rate</text>"#,
        MARGIN + size / 2.0 - 40.0,
        total - 10.0
    );
    s.push_str("</svg>\n");
    s
}
