//! Minimal SVG bar charts for histograms.

use std::fmt::Write;

use elegant::metrics::Histogram;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 40.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Overlaid, semi-transparent bars of histograms sharing their bin edges.
/// Heights are normalized to densities so that series of different sizes
/// compare.
pub fn histograms(title: &str, series: &[(&str, &Histogram)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let Some((_, first)) = series.first() else {
        out.push_str("</svg>\n");
        return out;
    };
    let lo = first.edges[0];
    let hi = *first.edges.last().expect("non-empty edges");
    let densities: Vec<Vec<f64>> = series
        .iter()
        .map(|(_, h)| {
            let total = h.counts.iter().sum::<usize>().max(1) as f64;
            h.counts
                .iter()
                .zip(h.edges.windows(2))
                .map(|(c, e)| *c as f64 / total / (e[1] - e[0]))
                .collect()
        })
        .collect();
    let top = densities.iter().flatten().cloned().fold(0.0, f64::max).max(1e-12);
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let sx = |x: f64| MARGIN + (x - lo) / (hi - lo) * plot_w;
    let base = HEIGHT - MARGIN;
    for (k, ((name, h), dens)) in series.iter().zip(&densities).enumerate() {
        let color = COLORS[k % COLORS.len()];
        for (d, e) in dens.iter().zip(h.edges.windows(2)) {
            let bar = d / top * plot_h;
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.45"/>"#,
                sx(e[0]),
                base - bar,
                (sx(e[1]) - sx(e[0])).max(0.5),
                bar
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.0}" y="{:.0}" font-family="sans-serif" font-size="12" fill="{color}">{}</text>"#,
            WIDTH - MARGIN - 150.0,
            MARGIN + 16.0 * k as f64,
            escape(name)
        );
    }
    let _ = writeln!(
        out,
        r#"<line x1="{MARGIN}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#,
        WIDTH - MARGIN
    );
    for (x, anchor) in [(lo, "start"), (hi, "end")] {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="{anchor}" font-family="sans-serif" font-size="11">{x:.3}</text>"#,
            sx(x),
            base + 16.0
        );
    }
    out.push_str("</svg>\n");
    out
}
