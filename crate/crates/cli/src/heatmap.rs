//! Standalone SVG heatmap of a similarity matrix.
//!
//! Blue for −1, white for 0, red for +1, one annotated cell per entry.
//! Output depends only on the matrix, so equal matrices give equal bytes.

use std::fmt::Write as _;
use std::path::Path;

use samerge_core::analysis::SimilarityMatrix;
use samerge_core::Result;

const CELL: usize = 56;
const CHAR_W: usize = 7;
const PAD: usize = 8;

const NEG: (f64, f64, f64) = (33.0, 102.0, 172.0);
const POS: (f64, f64, f64) = (178.0, 24.0, 43.0);

fn color(v: f64) -> String {
    let v = if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 };
    let (end, t) = if v < 0.0 { (NEG, -v) } else { (POS, v) };
    let mix = |c: f64| (255.0 + (c - 255.0) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(end.0), mix(end.1), mix(end.2))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Two decimals, with negative zero printed as `0.00`.
fn annotation(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" { "0.00".into() } else { s }
}

pub fn render_svg(m: &SimilarityMatrix) -> String {
    let n = m.len();
    let label_w = m.labels.iter().map(|l| l.chars().count()).max().unwrap_or(0) * CHAR_W + 2 * PAD;
    let (x0, y0) = (label_w, label_w);
    let (w, h) = (x0 + n * CELL + PAD, y0 + n * CELL + PAD);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="monospace" font-size="12">"#).unwrap();
    writeln!(s, r##"<rect width="{w}" height="{h}" fill="#ffffff"/>"##).unwrap();
    for (i, label) in m.labels.iter().enumerate() {
        let label = escape(label);
        let c = i * CELL + CELL / 2;
        writeln!(s, r#"<text class="row-label" x="{}" y="{}" text-anchor="end" dominant-baseline="middle">{label}</text>"#, x0 - PAD, y0 + c).unwrap();
        writeln!(s, r#"<text class="col-label" transform="translate({},{}) rotate(-90)" text-anchor="start" dominant-baseline="middle">{label}</text>"#, x0 + c, y0 - PAD).unwrap();
    }
    for (i, row) in m.values.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let (x, y) = (x0 + j * CELL, y0 + i * CELL);
            let ink = if v.abs() > 0.6 { "#ffffff" } else { "#000000" };
            writeln!(s, r##"<rect class="cell" x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}" stroke="#ffffff"/>"##, color(v)).unwrap();
            writeln!(s, r#"<text class="value" x="{}" y="{}" text-anchor="middle" dominant-baseline="middle" fill="{ink}">{}</text>"#, x + CELL / 2, y + CELL / 2, annotation(v)).unwrap();
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn emit_heatmap(m: &SimilarityMatrix, path: &Path) -> Result<()> {
    std::fs::write(path, render_svg(m))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity() -> SimilarityMatrix {
        SimilarityMatrix { labels: vec!["speed".into(), "pitch<&>".into()], values: vec![vec![1.0, 0.0], vec![0.0, 1.0]] }
    }

    #[test]
    fn identity_has_four_cells_and_annotations() {
        let svg = render_svg(&identity());
        assert_eq!(svg.matches(r#"class="cell""#).count(), 4);
        assert_eq!(svg.matches(">1.00<").count(), 2);
        assert_eq!(svg.matches(">0.00<").count(), 2);
        assert!(svg.contains("pitch&lt;&amp;&gt;"));
    }

    #[test]
    fn labels_in_matrix_order_and_stable_bytes() {
        let svg = render_svg(&identity());
        assert!(svg.find(">speed<").unwrap() < svg.find(">pitch&lt;").unwrap());
        assert_eq!(svg, render_svg(&identity()));
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(color(0.0), "#ffffff");
        assert_eq!(color(1.0), "#b2182b");
        assert_eq!(color(-1.0), "#2166ac");
        assert_eq!(annotation(-0.001), "0.00");
    }
}
