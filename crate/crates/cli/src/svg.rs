//! Hand-rolled SVG heatmaps.

use std::fmt::Write as _;

/// Eight stops sampled from viridis.
const STOPS: [(f64, f64, f64); 8] = [
    (68.0, 1.0, 84.0),
    (70.0, 50.0, 126.0),
    (54.0, 92.0, 141.0),
    (39.0, 127.0, 142.0),
    (31.0, 161.0, 135.0),
    (74.0, 193.0, 109.0),
    (160.0, 218.0, 57.0),
    (253.0, 231.0, 37.0),
];

/// Colour for `t ∈ [0, 1]`, linearly interpolated between the stops.
pub fn colormap(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    let mix = |p: f64, q: f64| (p + f * (q - p)).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

pub struct Panel<'a> {
    pub title: String,
    /// Row-major `res × res` values, `x` varying fastest.
    pub values: &'a [f64],
}

const CELL: f64 = 8.0;
const GAP: f64 = 24.0;

/// Panels laid out in a grid of `cols` columns; each panel gets its own
/// colour range. Rows of values are drawn bottom-up so `y` grows upwards.
pub fn heatmap_grid(panels: &[Panel], res: usize, cols: usize) -> String {
    let side = res as f64 * CELL;
    let cols = cols.max(1);
    let rows = panels.len().div_ceil(cols);
    let width = cols as f64 * (side + GAP) + GAP;
    let height = rows as f64 * (side + 2.0 * GAP) + GAP;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    for (k, p) in panels.iter().enumerate() {
        let ox = GAP + (k % cols) as f64 * (side + GAP);
        let oy = GAP + (k / cols) as f64 * (side + 2.0 * GAP);
        let finite = p.values.iter().copied().filter(|v| v.is_finite());
        let lo = finite.clone().fold(f64::INFINITY, f64::min);
        let hi = finite.fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let _ = writeln!(s, r#"<text x="{ox}" y="{}">{}</text>"#, oy - 6.0, escape(&p.title));
        for (idx, &v) in p.values.iter().enumerate().take(res * res) {
            let (i, j) = (idx / res, idx % res);
            let x = ox + j as f64 * CELL;
            let y = oy + (res - 1 - i) as f64 * CELL;
            let _ = writeln!(s, r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}"/>"#, colormap((v - lo) / span));
        }
        let _ = writeln!(s, r#"<text x="{ox}" y="{}">{lo:.3} … {hi:.3}</text>"#, oy + side + 14.0);
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), "#440154");
        assert_eq!(colormap(1.0), "#fde725");
        assert_eq!(colormap(f64::NAN), colormap(0.0));
    }

    #[test]
    fn one_rect_per_cell() {
        let v: Vec<f64> = (0..9).map(f64::from).collect();
        let svg = heatmap_grid(&[Panel { title: "a<b".into(), values: &v }, Panel { title: "c".into(), values: &v }], 3, 2);
        assert_eq!(svg.matches("<rect").count(), 1 + 18);
        assert!(svg.contains("a&lt;b"));
        assert!(svg.ends_with("</svg>\n"));
    }
}
