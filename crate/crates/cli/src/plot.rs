//! Static SVG line chart of C-index against horizon.

use std::fmt::Write;

use deepjoint::eval::MetricReport;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 60.0;
const LEGEND: f64 = 170.0;
const PALETTE: [&str; 9] =
    ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One line per variant with its bootstrap interval as error bars.
pub fn c_index_svg(reports: &[(String, MetricReport)]) -> String {
    let horizons: Vec<f64> = reports.first().map(|(_, r)| r.horizons.iter().map(|h| h.horizon).collect()).unwrap_or_default();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, r) in reports {
        for h in &r.horizons {
            lo = lo.min(h.c_index.lo);
            hi = hi.max(h.c_index.hi);
        }
    }
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.1).max(0.01);
    let (lo, hi) = ((lo - pad).max(0.0), (hi + pad).min(1.0));

    let plot_w = WIDTH - 2.0 * MARGIN - LEGEND;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let x = |i: usize| {
        if horizons.len() <= 1 {
            MARGIN + plot_w / 2.0
        } else {
            MARGIN + plot_w * i as f64 / (horizons.len() - 1) as f64
        }
    };
    let y = |v: f64| MARGIN + plot_h * (hi - v) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">Time-dependent C-index by horizon</text>"#,
        MARGIN + plot_w / 2.0,
        MARGIN / 2.0
    );
    // axes
    let _ = writeln!(
        s,
        r#"<path d="M{MARGIN},{MARGIN} V{} H{}" fill="none" stroke="black"/>"#,
        MARGIN + plot_h,
        MARGIN + plot_w
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * f64::from(k) / 4.0;
        let yy = y(v);
        let _ = writeln!(s, r##"<line x1="{MARGIN}" x2="{}" y1="{yy:.1}" y2="{yy:.1}" stroke="#ddd"/>"##, MARGIN + plot_w);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, MARGIN - 6.0, yy + 4.0);
    }
    for (i, h) in horizons.iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{h} d</text>"#, x(i), MARGIN + plot_h + 18.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">Horizon (days after the first 24 h)</text>"#,
        MARGIN + plot_w / 2.0,
        HEIGHT - 14.0
    );

    for (k, (name, report)) in reports.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let points: Vec<String> =
            report.horizons.iter().enumerate().map(|(i, h)| format!("{:.1},{:.1}", x(i), y(h.c_index.mean))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#, points.join(" "));
        for (i, h) in report.horizons.iter().enumerate() {
            let xx = x(i);
            let _ = writeln!(
                s,
                r#"<line x1="{xx:.1}" x2="{xx:.1}" y1="{:.1}" y2="{:.1}" stroke="{colour}"/>"#,
                y(h.c_index.lo),
                y(h.c_index.hi)
            );
            let _ = writeln!(s, r#"<circle cx="{xx:.1}" cy="{:.1}" r="3" fill="{colour}"/>"#, y(h.c_index.mean));
        }
        let ly = MARGIN + 18.0 * k as f64;
        let lx = WIDTH - LEGEND - MARGIN / 2.0;
        let _ = writeln!(s, r#"<rect x="{lx}" y="{}" width="12" height="12" fill="{colour}"/>"#, ly - 10.0);
        let _ = writeln!(s, r#"<text x="{}" y="{ly}">{}</text>"#, lx + 18.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use deepjoint::eval::{HorizonMetrics, Interval};

    #[test]
    fn one_polyline_per_variant() {
        let i = Interval { mean: 0.7, lo: 0.65, hi: 0.75 };
        let r = MetricReport {
            horizons: [1.0, 7.0, 14.0].iter().map(|&h| HorizonMetrics { horizon: h, c_index: i, brier: i }).collect(),
            n_bootstrap: 2,
        };
        let svg = c_index_svg(&[("A<B".into(), r.clone()), ("C".into(), r)]);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("A&lt;B"));
    }
}
