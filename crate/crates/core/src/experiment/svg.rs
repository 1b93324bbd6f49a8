//! Minimal SVG 1.1 line charts and heatmaps.

use std::fmt::Write;

/// Plot area in SVG user units.
pub const PLOT_LEFT: f64 = 70.0;
pub const PLOT_RIGHT: f64 = 570.0;
pub const PLOT_TOP: f64 = 40.0;
pub const PLOT_BOTTOM: f64 = 340.0;
const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 400.0;

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Data range mapped onto the plot area. A degenerate range is widened
/// symmetrically so single points land mid-axis.
fn span(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        let pad = if lo == 0.0 { 0.5 } else { lo.abs() * 0.05 };
        (lo - pad, hi + pad)
    }
}

/// Line chart whose axes run exactly from the data minimum to the data
/// maximum. Each point gets a circle marker carrying its data coordinates.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    let (xmin, xmax) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (ymin, ymax) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let (x0, x1) = if all.is_empty() { (0.0, 1.0) } else { span(xmin, xmax) };
    let (y0, y1) = if all.is_empty() { (0.0, 1.0) } else { span(ymin, ymax) };
    let sx = |x: f64| PLOT_LEFT + (x - x0) / (x1 - x0) * (PLOT_RIGHT - PLOT_LEFT);
    let sy = |y: f64| PLOT_BOTTOM - (y - y0) / (y1 - y0) * (PLOT_BOTTOM - PLOT_TOP);

    let mut s = header();
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#, WIDTH / 2.0, esc(title));
    let _ = writeln!(
        s,
        r#"<g id="axes" data-x-min="{x0}" data-x-max="{x1}" data-y-min="{y0}" data-y-max="{y1}" stroke="black" fill="none">"#
    );
    let _ = writeln!(s, r#"<line x1="{PLOT_LEFT}" y1="{PLOT_BOTTOM}" x2="{PLOT_RIGHT}" y2="{PLOT_BOTTOM}"/>"#);
    let _ = writeln!(s, r#"<line x1="{PLOT_LEFT}" y1="{PLOT_TOP}" x2="{PLOT_LEFT}" y2="{PLOT_BOTTOM}"/>"#);
    s.push_str("</g>\n");
    let _ = writeln!(s, r#"<g font-size="11">"#);
    let _ = writeln!(s, r#"<text class="tick-x" x="{PLOT_LEFT}" y="{}" text-anchor="middle">{x0}</text>"#, PLOT_BOTTOM + 16.0);
    let _ = writeln!(s, r#"<text class="tick-x" x="{PLOT_RIGHT}" y="{}" text-anchor="middle">{x1}</text>"#, PLOT_BOTTOM + 16.0);
    let _ = writeln!(s, r#"<text class="tick-y" x="{}" y="{PLOT_BOTTOM}" text-anchor="end">{y0}</text>"#, PLOT_LEFT - 6.0);
    let _ = writeln!(s, r#"<text class="tick-y" x="{}" y="{PLOT_TOP}" text-anchor="end">{y1}</text>"#, PLOT_LEFT - 6.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (PLOT_LEFT + PLOT_RIGHT) / 2.0, PLOT_BOTTOM + 36.0, esc(x_label));
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        (PLOT_TOP + PLOT_BOTTOM) / 2.0,
        (PLOT_TOP + PLOT_BOTTOM) / 2.0,
        esc(y_label)
    );
    s.push_str("</g>\n");

    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, r#"<g class="series" data-label="{}" stroke="{color}" fill="{color}">"#, esc(&ser.label));
        let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{},{}", sx(x), sy(y))).collect();
        if pts.len() > 1 {
            let _ = writeln!(s, r#"<polyline fill="none" points="{}"/>"#, pts.join(" "));
        }
        for &(x, y) in &ser.points {
            let _ = writeln!(s, r#"<circle cx="{}" cy="{}" r="3" data-x="{x}" data-y="{y}"/>"#, sx(x), sy(y));
        }
        s.push_str("</g>\n");
        let ly = PLOT_TOP + 16.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#, PLOT_RIGHT + 12.0, ly);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11">{}</text>"#, PLOT_RIGHT + 26.0, ly + 9.0, esc(&ser.label));
    }
    s.push_str("</svg>\n");
    s
}

/// Heatmap with one cell per `(row, col)`; `None` cells are left blank.
/// Colors run on a log scale when every value is positive.
pub fn heatmap(title: &str, row_label: &str, col_label: &str, rows: &[String], cols: &[String], values: &[Vec<Option<f64>>]) -> String {
    let finite: Vec<f64> = values.iter().flatten().flatten().copied().filter(|v| v.is_finite()).collect();
    let log = !finite.is_empty() && finite.iter().all(|&v| v > 0.0);
    let tr = |v: f64| if log { v.log10() } else { v };
    let (lo, hi) = finite.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(tr(v)), b.max(tr(v))));
    let cw = (PLOT_RIGHT - PLOT_LEFT) / cols.len().max(1) as f64;
    let ch = (PLOT_BOTTOM - PLOT_TOP) / rows.len().max(1) as f64;

    let mut s = header();
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#, WIDTH / 2.0, esc(title));
    for (r, row) in values.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let Some(v) = v else { continue };
            let t = if hi > lo { (tr(*v) - lo) / (hi - lo) } else { 0.5 };
            let (x, y) = (PLOT_LEFT + c as f64 * cw, PLOT_TOP + r as f64 * ch);
            let _ = writeln!(
                s,
                r#"<rect class="cell" x="{x}" y="{y}" width="{cw}" height="{ch}" fill="{}" data-row="{r}" data-col="{c}" data-value="{v}"/>"#,
                viridis(t)
            );
            let fg = if t > 0.6 { "black" } else { "white" };
            let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="middle" fill="{fg}">{:.3e}</text>"#, x + cw / 2.0, y + ch / 2.0 + 4.0, v);
        }
    }
    for (r, l) in rows.iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{}</text>"#, PLOT_LEFT - 6.0, PLOT_TOP + (r as f64 + 0.5) * ch + 4.0, esc(l));
    }
    for (c, l) in cols.iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{}</text>"#, PLOT_LEFT + (c as f64 + 0.5) * cw, PLOT_BOTTOM + 16.0, esc(l));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (PLOT_LEFT + PLOT_RIGHT) / 2.0, PLOT_BOTTOM + 36.0, esc(col_label));
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        (PLOT_TOP + PLOT_BOTTOM) / 2.0,
        (PLOT_TOP + PLOT_BOTTOM) / 2.0,
        esc(row_label)
    );
    s.push_str("</svg>\n");
    s
}

fn header() -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

/// Piecewise-linear approximation of the viridis colormap.
fn viridis(t: f64) -> String {
    const STOPS: [(f64, f64, f64); 5] = [(68.0, 1.0, 84.0), (59.0, 82.0, 139.0), (33.0, 145.0, 140.0), (94.0, 201.0, 98.0), (253.0, 231.0, 37.0)];
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    let mix = |x: f64, y: f64| (x + (y - x) * f).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}
