//! Static SVG charts of forecast bands.

use std::fmt::Write;

const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 45.0;
const TICKS: usize = 5;

/// One coordinate's forecast: mean line, shaded band, optional truth line.
pub struct BandChart {
    pub title: String,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub truth: Option<Vec<f64>>,
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    steps: usize,
    lo: f64,
    hi: f64,
}

impl Frame {
    /// Step k is 1-based.
    fn x(&self, k: usize) -> f64 {
        if self.steps == 1 {
            return (self.x0 + self.x1) / 2.0;
        }
        self.x0 + (k - 1) as f64 / (self.steps - 1) as f64 * (self.x1 - self.x0)
    }

    fn y(&self, v: f64) -> f64 {
        self.y1 - (v - self.lo) / (self.hi - self.lo) * (self.y1 - self.y0)
    }
}

fn polyline_d(frame: &Frame, values: &[f64]) -> String {
    let mut d = String::new();
    for (i, v) in values.iter().enumerate() {
        let cmd = if i == 0 { 'M' } else { 'L' };
        let _ = write!(d, "{cmd}{:.2},{:.2} ", frame.x(i + 1), frame.y(*v));
    }
    d.trim_end().to_string()
}

impl BandChart {
    /// Band vertices: upper edge left to right, lower edge right to left,
    /// then the first vertex again to close the ring.
    pub fn band_vertices(&self, frame_x: impl Fn(usize) -> f64, frame_y: impl Fn(f64) -> f64) -> Vec<(f64, f64)> {
        let n = self.mean.len();
        let mut pts: Vec<(f64, f64)> = (0..n).map(|i| (frame_x(i + 1), frame_y(self.upper[i]))).collect();
        pts.extend((0..n).rev().map(|i| (frame_x(i + 1), frame_y(self.lower[i]))));
        pts.push(pts[0]);
        pts
    }

    pub fn render(&self, width: u32, height: u32) -> String {
        let (w, h) = (width as f64, height as f64);
        let series = [Some(&self.lower), Some(&self.upper), Some(&self.mean), self.truth.as_ref()];
        let (mut lo, mut hi) = series
            .iter()
            .flatten()
            .flat_map(|s| s.iter())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        if hi - lo < 1e-12 * lo.abs().max(1.0) {
            lo -= 0.5;
            hi += 0.5;
        }
        let pad = 0.05 * (hi - lo);
        let frame = Frame {
            x0: MARGIN_LEFT,
            x1: w - MARGIN_RIGHT,
            y0: MARGIN_TOP,
            y1: h - MARGIN_BOTTOM,
            steps: self.mean.len(),
            lo: lo - pad,
            hi: hi + pad,
        };

        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
        );
        let _ = writeln!(svg, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
            w / 2.0,
            self.title
        );

        let band: Vec<String> = self
            .band_vertices(|k| frame.x(k), |v| frame.y(v))
            .iter()
            .map(|(x, y)| format!("{x:.2},{y:.2}"))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polygon class="band" points="{}" fill="steelblue" fill-opacity="0.3" stroke="none"/>"#,
            band.join(" ")
        );
        if let Some(t) = &self.truth {
            let _ = writeln!(
                svg,
                r#"<path class="truth" d="{}" fill="none" stroke="black" stroke-width="1.5"/>"#,
                polyline_d(&frame, t)
            );
        }
        let _ = writeln!(
            svg,
            r#"<path class="mean" d="{}" fill="none" stroke="steelblue" stroke-width="1.5" stroke-dasharray="6 3"/>"#,
            polyline_d(&frame, &self.mean)
        );

        let _ = writeln!(svg, r#"<g class="axes" stroke="black" font-family="sans-serif" font-size="11">"#);
        let _ = writeln!(
            svg,
            r#"<line x1="{0:.2}" y1="{1:.2}" x2="{2:.2}" y2="{1:.2}"/><line x1="{0:.2}" y1="{3:.2}" x2="{0:.2}" y2="{1:.2}"/>"#,
            frame.x0, frame.y1, frame.x1, frame.y0
        );
        for i in 0..=TICKS {
            let frac = i as f64 / TICKS as f64;
            let step = 1.0 + frac * (frame.steps.max(2) - 1) as f64;
            let x = frame.x0 + frac * (frame.x1 - frame.x0);
            let _ = writeln!(
                svg,
                r#"<line x1="{x:.2}" y1="{0:.2}" x2="{x:.2}" y2="{1:.2}"/><text x="{x:.2}" y="{2:.2}" text-anchor="middle" stroke="none">{3:.0}</text>"#,
                frame.y1,
                frame.y1 + 5.0,
                frame.y1 + 18.0,
                step
            );
            let v = frame.lo + frac * (frame.hi - frame.lo);
            let y = frame.y(v);
            let _ = writeln!(
                svg,
                r#"<line x1="{0:.2}" y1="{y:.2}" x2="{1:.2}" y2="{y:.2}"/><text x="{2:.2}" y="{3:.2}" text-anchor="end" stroke="none">{v:.3}</text>"#,
                frame.x0 - 5.0,
                frame.x0,
                frame.x0 - 8.0,
                y + 4.0
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" stroke="none">step</text>"#,
            (frame.x0 + frame.x1) / 2.0,
            h - 8.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="16" y="{0:.2}" text-anchor="middle" stroke="none" transform="rotate(-90 16 {0:.2})">value</text>"#,
            (frame.y0 + frame.y1) / 2.0
        );
        svg.push_str("</g>\n</svg>\n");
        svg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chart(n: usize, truth: bool) -> BandChart {
        let mean: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
        BandChart {
            title: "coordinate 0".into(),
            lower: mean.iter().map(|v| v - 0.2).collect(),
            upper: mean.iter().map(|v| v + 0.2).collect(),
            truth: truth.then(|| mean.iter().map(|v| v + 0.05).collect()),
            mean,
        }
    }

    #[test]
    fn svg_parses_with_one_path_per_series() {
        let svg = chart(30, true).render(800, 400);
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let paths: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("path")).collect();
        assert_eq!(paths.len(), 2);
        let no_truth = chart(30, false).render(800, 400);
        let doc = roxmltree::Document::parse(&no_truth).unwrap();
        assert_eq!(doc.descendants().filter(|n| n.has_tag_name("path")).count(), 1);
    }

    #[test]
    fn band_polygon_is_closed_with_two_n_plus_one_vertices() {
        for n in [1, 2, 17] {
            let c = chart(n, false);
            let svg = c.render(600, 300);
            let doc = roxmltree::Document::parse(&svg).unwrap();
            let poly = doc.descendants().find(|n| n.has_tag_name("polygon")).unwrap();
            let pts: Vec<&str> = poly.attribute("points").unwrap().split(' ').collect();
            assert_eq!(pts.len(), 2 * n + 1);
            assert_eq!(pts[0], pts[2 * n]);
        }
    }

    #[test]
    fn flat_series_still_renders() {
        let c = BandChart {
            title: "flat".into(),
            mean: vec![2.0; 4],
            lower: vec![2.0; 4],
            upper: vec![2.0; 4],
            truth: None,
        };
        let svg = c.render(400, 300);
        assert!(!svg.contains("NaN"));
        roxmltree::Document::parse(&svg).unwrap();
    }
}
