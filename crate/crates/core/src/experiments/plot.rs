//! SVG scatter of (Fréchet proxy, R) points with the fitted parabola.

use std::fmt::Write;

use super::curves::RfidCurve;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 360.0;
const PAD: f64 = 48.0;
const CURVE_SEGMENTS: usize = 100;

/// Renders one family's points and curve. `points` are `(frechet, R)`.
pub fn rfid_svg(title: &str, points: &[(f64, f64)], curve: Option<&RfidCurve>) -> String {
    let xs = points.iter().map(|p| p.0);
    let ys = points.iter().map(|p| p.1);
    let (x0, x1) = padded_range(xs);
    let (y0, y1) = padded_range(ys);
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * PAD);
    let sy = |y: f64| HEIGHT - PAD - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * PAD);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (left, right, top, bottom) = (PAD, WIDTH - PAD, PAD, HEIGHT - PAD);
    let _ = writeln!(
        svg,
        r#"<path d="M{left},{top} L{left},{bottom} L{right},{bottom}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">Fréchet proxy ({x0:.3} to {x1:.3})</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">R ({y0:.3} to {y1:.3})</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );

    if let Some(c) = curve {
        let (lo, hi) = c.frechet_range;
        let path: Vec<String> = (0..=CURVE_SEGMENTS)
            .map(|i| {
                let x = lo + (hi - lo) * i as f64 / CURVE_SEGMENTS as f64;
                let cmd = if i == 0 { 'M' } else { 'L' };
                format!("{cmd}{:.2},{:.2}", sx(x), sy(c.fit.eval(x)))
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<path d="{}" fill="none" stroke="steelblue" stroke-width="1.5"/>"#,
            path.join(" ")
        );
    }
    for &(x, y) in points {
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="darkorange"/>"#,
            sx(x),
            sy(y)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.1).max(1e-3);
    (lo - pad, hi + pad)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_points_and_curve() {
        let svg = rfid_svg("a<b", &[(0.1, 0.9), (0.2, 0.8), (0.3, 0.85)], None);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.contains("a&lt;b"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }
}
