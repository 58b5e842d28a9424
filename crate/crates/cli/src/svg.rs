//! Minimal line charts as SVG markup. Every data point becomes one `<circle>`
//! carrying its coordinates in `data-x` / `data-y`.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// A highlighted point, drawn as a ring with a label.
#[derive(Clone, Debug)]
pub struct Marker {
    pub x: f64,
    pub y: f64,
    pub label: String,
}

#[derive(Clone, Debug, Default)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    pub markers: Vec<Marker>,
    /// Labels drawn next to individual points, keyed by `(series, point)` index.
    pub point_labels: Vec<((usize, usize), String)>,
}

pub fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo.abs() > 1e-12 { lo.abs() * 0.05 } else { 0.5 };
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

fn tick_label(v: f64) -> String {
    let a = v.abs();
    if a >= 1e6 {
        format!("{:.2}M", v / 1e6)
    } else if a >= 1e4 {
        format!("{:.1}K", v / 1e3)
    } else if a >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

impl Chart {
    pub fn render(&self) -> String {
        let all = || self.series.iter().flat_map(|s| s.points.iter().copied());
        let (x0, x1) = extent(all().map(|p| p.0));
        let (y0, y1) = extent(all().map(|p| p.1));
        let pw = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        let ph = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
        let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| MARGIN_TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );
        // axes
        let (bx, by) = (MARGIN_LEFT, MARGIN_TOP + ph);
        let _ = writeln!(
            s,
            r#"<path d="M{bx:.1},{MARGIN_TOP:.1} L{bx:.1},{by:.1} L{:.1},{by:.1}" fill="none" stroke="black"/>"#,
            bx + pw
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            let (tx, ty) = (sx(xv), sy(yv));
            let _ = writeln!(
                s,
                r#"<line x1="{tx:.1}" y1="{by:.1}" x2="{tx:.1}" y2="{:.1}" stroke="black"/><text x="{tx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                by + 5.0,
                by + 18.0,
                tick_label(xv)
            );
            let _ = writeln!(
                s,
                r#"<line x1="{:.1}" y1="{ty:.1}" x2="{bx:.1}" y2="{ty:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                bx - 5.0,
                bx - 8.0,
                ty + 4.0,
                tick_label(yv)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            MARGIN_LEFT + pw / 2.0,
            HEIGHT - 10.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            MARGIN_TOP + ph / 2.0,
            MARGIN_TOP + ph / 2.0,
            escape(&self.y_label)
        );

        for (si, series) in self.series.iter().enumerate() {
            let color = PALETTE[si % PALETTE.len()];
            let path: Vec<String> = series
                .points
                .iter()
                .enumerate()
                .map(|(i, &(x, y))| format!("{}{:.2},{:.2}", if i == 0 { 'M' } else { 'L' }, sx(x), sy(y)))
                .collect();
            let _ = writeln!(s, r#"<g class="series" data-name="{}">"#, escape(&series.name));
            if series.points.len() > 1 {
                let _ = writeln!(
                    s,
                    r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                    path.join(" ")
                );
            }
            for (pi, &(x, y)) in series.points.iter().enumerate() {
                let _ = writeln!(
                    s,
                    r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="3" fill="{color}" data-x="{x}" data-y="{y}"/>"#,
                    sx(x),
                    sy(y)
                );
                if let Some((_, label)) = self.point_labels.iter().find(|(k, _)| *k == (si, pi)) {
                    let _ = writeln!(
                        s,
                        r#"<text x="{:.2}" y="{:.2}" font-size="10">{}</text>"#,
                        sx(x) + 5.0,
                        sy(y) - 5.0,
                        escape(label)
                    );
                }
            }
            let _ = writeln!(s, "</g>");
        }
        if self.series.len() > 1 {
            for (si, series) in self.series.iter().enumerate() {
                let y = MARGIN_TOP + 4.0 + 16.0 * si as f64;
                let x = WIDTH - MARGIN_RIGHT - 140.0;
                let _ = writeln!(
                    s,
                    r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                    y - 9.0,
                    PALETTE[si % PALETTE.len()],
                    x + 14.0,
                    y,
                    escape(&series.name)
                );
            }
        }
        for m in &self.markers {
            let _ = writeln!(
                s,
                r#"<circle class="marker" cx="{:.2}" cy="{:.2}" r="7" fill="none" stroke="black" stroke-width="2" data-x="{}" data-y="{}"/><text x="{:.2}" y="{:.2}" text-anchor="middle" font-weight="bold">{}</text>"#,
                sx(m.x),
                sy(m.y),
                m.x,
                m.y,
                sx(m.x),
                sy(m.y) - 12.0,
                escape(&m.label)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_is_valid_xml_with_one_circle_per_point() {
        let chart = Chart {
            title: "loss <by> layer & more".into(),
            x_label: "layer".into(),
            y_label: "loss".into(),
            series: vec![
                Series {
                    name: "a".into(),
                    points: vec![(1.0, 2.0), (2.0, 1.5), (3.0, 1.7)],
                },
                Series {
                    name: "b".into(),
                    points: vec![(1.0, 3.0)],
                },
            ],
            markers: vec![Marker {
                x: 2.0,
                y: 1.5,
                label: "min".into(),
            }],
            point_labels: vec![((0, 1), "x".into())],
        };
        let svg = chart.render();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let points = doc
            .descendants()
            .filter(|n| n.has_tag_name("circle") && n.attribute("class") == Some("point"))
            .count();
        assert_eq!(points, 4);
        assert!(svg.contains("&lt;by&gt;"));
    }

    #[test]
    fn degenerate_ranges_render() {
        let chart = Chart {
            series: vec![Series {
                name: "flat".into(),
                points: vec![(1.0, 0.0), (1.0, 0.0)],
            }],
            ..Default::default()
        };
        let svg = chart.render();
        assert!(!svg.contains("NaN"));
        roxmltree::Document::parse(&svg).unwrap();
    }
}
