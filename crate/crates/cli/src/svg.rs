//! Standalone SVG figures of confidence ellipses.
//!
//! Z-order, bottom to top: frame and ticks, ellipses from largest area to
//! smallest (a containing region never hides the one it contains), point
//! markers, then the legend. Ellipses are drawn in data coordinates inside
//! a transformed group, so the `<ellipse>` radii are the semi-axes and the
//! rotation is the major-axis angle from the covariance eigenvectors.

use std::fmt::Write as _;
use std::path::Path;

use nuisance_core::EllipseSpec;

use crate::error::{CliError, CliResult};

const WIDTH: f64 = 560.0;
const HEIGHT: f64 = 440.0;
const MARGIN_LEFT: f64 = 80.0;
const MARGIN_RIGHT: f64 = 30.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 60.0;
const TICKS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrokeStyle {
    Solid,
    Dashed,
    Dotted,
}

impl StrokeStyle {
    fn dasharray(self) -> Option<&'static str> {
        match self {
            StrokeStyle::Solid => None,
            StrokeStyle::Dashed => Some("8 4"),
            StrokeStyle::Dotted => Some("2 3"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EllipseLayer {
    pub ellipse: EllipseSpec,
    pub label: String,
    pub color: String,
    pub style: StrokeStyle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarkerShape {
    Dot,
    Cross,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Marker {
    pub at: [f64; 2],
    pub label: String,
    pub shape: MarkerShape,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Figure {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub layers: Vec<EllipseLayer>,
    pub markers: Vec<Marker>,
}

/// The usual pair: adjusted solid, unadjusted dashed, `θ̂` and `θ*` marked.
pub fn adjusted_pair_figure(
    title: &str,
    labels: (&str, &str),
    unadjusted: &EllipseSpec,
    adjusted: &EllipseSpec,
    truth: Option<[f64; 2]>,
) -> Figure {
    let mut markers = vec![Marker {
        at: unadjusted.center,
        label: "estimate".into(),
        shape: MarkerShape::Dot,
    }];
    if let Some(t) = truth {
        markers.push(Marker {
            at: t,
            label: "true value".into(),
            shape: MarkerShape::Cross,
        });
    }
    Figure {
        title: title.into(),
        x_label: labels.0.into(),
        y_label: labels.1.into(),
        layers: vec![
            EllipseLayer {
                ellipse: *adjusted,
                label: "adjusted".into(),
                color: "#c0392b".into(),
                style: StrokeStyle::Solid,
            },
            EllipseLayer {
                ellipse: *unadjusted,
                label: "unadjusted".into(),
                color: "#2c3e50".into(),
                style: StrokeStyle::Dashed,
            },
        ],
        markers,
    }
}

struct Frame {
    xmin: f64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
}

impl Frame {
    fn fit(fig: &Figure) -> Frame {
        let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        let mut take = |p: [f64; 2]| {
            xmin = xmin.min(p[0]);
            xmax = xmax.max(p[0]);
            ymin = ymin.min(p[1]);
            ymax = ymax.max(p[1]);
        };
        for l in &fig.layers {
            let (lo, hi) = l.ellipse.bounding_box();
            take(lo);
            take(hi);
        }
        for m in &fig.markers {
            take(m.at);
        }
        if !xmin.is_finite() {
            (xmin, xmax, ymin, ymax) = (-1.0, 1.0, -1.0, 1.0);
        }
        let pad = |lo: f64, hi: f64| {
            let span = hi - lo;
            let p = if span > 0.0 { 0.08 * span } else { 0.5 * lo.abs().max(1.0) };
            (lo - p, hi + p)
        };
        let (xmin, xmax) = pad(xmin, xmax);
        let (ymin, ymax) = pad(ymin, ymax);
        Frame { xmin, xmax, ymin, ymax }
    }

    fn plot_w() -> f64 {
        WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    }

    fn plot_h() -> f64 {
        HEIGHT - MARGIN_TOP - MARGIN_BOTTOM
    }

    fn sx(&self) -> f64 {
        Self::plot_w() / (self.xmax - self.xmin)
    }

    fn sy(&self) -> f64 {
        Self::plot_h() / (self.ymax - self.ymin)
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN_LEFT + (x - self.xmin) * self.sx()
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_BOTTOM - (y - self.ymin) * self.sy()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn tick_label(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e4).contains(&a) {
        format!("{v:.3e}")
    } else {
        format!("{v:.4}")
    }
}

/// Renders `fig`; identical input gives identical bytes.
pub fn render(fig: &Figure) -> String {
    let fr = Frame::fit(fig);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(&fig.title)
    );

    // Frame and ticks.
    let (x0, y0) = (MARGIN_LEFT, HEIGHT - MARGIN_BOTTOM);
    let _ = writeln!(
        s,
        r#"<rect x="{x0:.2}" y="{MARGIN_TOP:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
        Frame::plot_w(),
        Frame::plot_h()
    );
    for i in 0..=TICKS {
        let t = i as f64 / TICKS as f64;
        let xv = fr.xmin + t * (fr.xmax - fr.xmin);
        let yv = fr.ymin + t * (fr.ymax - fr.ymin);
        let (px, py) = (fr.px(xv), fr.py(yv));
        let _ = writeln!(s, r#"<line x1="{px:.2}" y1="{y0:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/>"#, y0 + 5.0);
        let _ = writeln!(
            s,
            r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            y0 + 19.0,
            tick_label(xv)
        );
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{py:.2}" x2="{x0:.2}" y2="{py:.2}" stroke="black"/>"#, x0 - 5.0);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            x0 - 8.0,
            py + 4.0,
            tick_label(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + Frame::plot_w() / 2.0,
        HEIGHT - 15.0,
        escape(&fig.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
        MARGIN_TOP + Frame::plot_h() / 2.0,
        MARGIN_TOP + Frame::plot_h() / 2.0,
        escape(&fig.y_label)
    );

    // Ellipses, largest first.
    let mut order: Vec<usize> = (0..fig.layers.len()).collect();
    order.sort_by(|&a, &b| {
        fig.layers[b]
            .ellipse
            .area()
            .total_cmp(&fig.layers[a].ellipse.area())
            .then(a.cmp(&b))
    });
    let _ = writeln!(
        s,
        r#"<g transform="matrix({} 0 0 {} {} {})">"#,
        fr.sx(),
        -fr.sy(),
        MARGIN_LEFT - fr.xmin * fr.sx(),
        HEIGHT - MARGIN_BOTTOM + fr.ymin * fr.sy()
    );
    for &i in &order {
        let l = &fig.layers[i];
        let e = &l.ellipse;
        let ax = e.axes();
        let dash = l
            .style
            .dasharray()
            .map(|d| format!(r#" stroke-dasharray="{d}""#))
            .unwrap_or_default();
        let _ = writeln!(
            s,
            r#"<ellipse data-label="{}" cx="{}" cy="{}" rx="{}" ry="{}" transform="rotate({} {} {})" fill="{}" fill-opacity="0.08" stroke="{}" stroke-width="2" vector-effect="non-scaling-stroke"{dash}/>"#,
            escape(&l.label),
            e.center[0],
            e.center[1],
            ax.semi_major,
            ax.semi_minor,
            ax.angle.to_degrees(),
            e.center[0],
            e.center[1],
            l.color,
            l.color,
        );
    }
    let _ = writeln!(s, "</g>");

    for m in &fig.markers {
        let (px, py) = (fr.px(m.at[0]), fr.py(m.at[1]));
        match m.shape {
            MarkerShape::Dot => {
                let _ = writeln!(s, r#"<circle data-label="{}" cx="{px:.2}" cy="{py:.2}" r="3.5" fill="black"/>"#, escape(&m.label));
            }
            MarkerShape::Cross => {
                let _ = writeln!(
                    s,
                    r#"<path data-label="{}" d="M {:.2} {:.2} L {:.2} {:.2} M {:.2} {:.2} L {:.2} {:.2}" stroke="black" stroke-width="2"/>"#,
                    escape(&m.label),
                    px - 5.0,
                    py - 5.0,
                    px + 5.0,
                    py + 5.0,
                    px - 5.0,
                    py + 5.0,
                    px + 5.0,
                    py - 5.0
                );
            }
        }
    }

    // Legend in the top-right corner of the plot area.
    let lx = WIDTH - MARGIN_RIGHT - 150.0;
    let mut ly = MARGIN_TOP + 16.0;
    for l in &fig.layers {
        let dash = l
            .style
            .dasharray()
            .map(|d| format!(r#" stroke-dasharray="{d}""#))
            .unwrap_or_default();
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{}" stroke-width="2"{dash}/>"#,
            lx + 28.0,
            l.color
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 34.0, ly + 4.0, escape(&l.label));
        ly += 18.0;
    }
    for m in &fig.markers {
        let glyph = match m.shape {
            MarkerShape::Dot => "\u{25CF}",
            MarkerShape::Cross => "\u{00D7}",
        };
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{glyph}</text><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 14.0,
            ly + 4.0,
            lx + 34.0,
            ly + 4.0,
            escape(&m.label)
        );
        ly += 18.0;
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_svg(path: &Path, fig: &Figure) -> CliResult<()> {
    std::fs::write(path, render(fig)).map_err(|e| CliError::output(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nuisance_core::adjust::ellipse_from_array;

    fn attr(svg: &str, tag_label: &str, name: &str) -> f64 {
        let start = svg.find(&format!(r#"data-label="{tag_label}""#)).unwrap();
        let rest = &svg[start..];
        let key = format!(r#" {name}=""#);
        let i = rest.find(&key).unwrap() + key.len();
        rest[i..i + rest[i..].find('"').unwrap()].parse().unwrap()
    }

    #[test]
    fn unit_circle_has_equal_radii() {
        let e = ellipse_from_array([0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]], 0.9).unwrap();
        let fig = Figure {
            layers: vec![EllipseLayer {
                ellipse: e,
                label: "c".into(),
                color: "black".into(),
                style: StrokeStyle::Solid,
            }],
            ..Default::default()
        };
        let svg = render(&fig);
        assert_eq!(attr(&svg, "c", "rx"), attr(&svg, "c", "ry"));
        assert!((attr(&svg, "c", "rx").powi(2) - 4.605170185988091).abs() < 1e-12);
    }

    #[test]
    fn larger_ellipse_is_drawn_first_with_distinct_strokes() {
        let small = ellipse_from_array([0.0, 0.0], [[1.0, 0.3], [0.3, 0.5]], 0.9).unwrap();
        let big = ellipse_from_array([0.0, 0.0], [[2.0, 0.3], [0.3, 1.5]], 0.9).unwrap();
        // Pass the small one first; rendering must still put the big one below.
        let mut fig = adjusted_pair_figure("t", ("a", "b"), &small, &big, Some([0.1, 0.1]));
        fig.layers.reverse();
        let svg = render(&fig);
        let adj = svg.find(r#"<ellipse data-label="adjusted""#).unwrap();
        let unadj = svg.find(r#"<ellipse data-label="unadjusted""#).unwrap();
        assert!(adj < unadj);
        let unadj_tag = &svg[unadj..unadj + svg[unadj..].find("/>").unwrap()];
        let adj_tag = &svg[adj..adj + svg[adj..].find("/>").unwrap()];
        assert!(unadj_tag.contains("stroke-dasharray"));
        assert!(!adj_tag.contains("stroke-dasharray"));
        assert!(svg.contains(r#"data-label="true value""#));
    }

    #[test]
    fn rendering_is_byte_stable() {
        let e = ellipse_from_array([0.3, -0.2], [[0.02, 0.01], [0.01, 0.03]], 0.9).unwrap();
        let fig = adjusted_pair_figure("x", ("a", "b"), &e, &e, None);
        assert_eq!(render(&fig), render(&fig.clone()));
    }

    #[test]
    fn rotation_matches_eigenvector() {
        let e = ellipse_from_array([0.0, 0.0], [[2.0, 1.0], [1.0, 2.0]], 0.9).unwrap();
        let fig = adjusted_pair_figure("r", ("a", "b"), &e, &e, None);
        let svg = render(&fig);
        let tag = &svg[svg.find("<ellipse").unwrap()..];
        let i = tag.find("rotate(").unwrap() + 7;
        let deg: f64 = tag[i..].split(' ').next().unwrap().parse().unwrap();
        assert!(((deg.rem_euclid(180.0)) - 45.0).abs() < 1e-9, "{deg}");
    }
}
