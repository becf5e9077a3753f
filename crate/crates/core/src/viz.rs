//! SVG heatmaps and stacked segmentation bands.

use std::fmt::Write;

use ndarray::ArrayView2;

use crate::data_model::IGNORE;

const PLOT_WIDTH: f64 = 720.0;
const LABEL_WIDTH: f64 = 110.0;
const TITLE_HEIGHT: f64 = 24.0;

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Fill color of an action id; ignored frames are gray.
pub fn class_color(label: usize) -> String {
    if label == IGNORE {
        return "#bdbdbd".into();
    }
    // Golden-angle hue steps keep neighboring ids apart.
    let hue = (label as f64 * 137.508) % 360.0;
    format!("hsl({hue:.1},65%,52%)")
}

/// Row-major heatmap, min-max scaled from white to dark blue.
pub fn heatmap_svg(values: ArrayView2<f64>, title: &str) -> String {
    let (rows, cols) = values.dim();
    let cell_w = (PLOT_WIDTH / cols.max(1) as f64).clamp(2.0, 48.0);
    let cell_h = (480.0 / rows.max(1) as f64).clamp(1.0, 48.0);
    let width = cell_w * cols as f64 + 20.0;
    let height = cell_h * rows as f64 + TITLE_HEIGHT + 10.0;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.1} {height:.1}">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="10" y="16" font-family="sans-serif" font-size="13">{} ({rows}x{cols}, range {lo:.3e}..{hi:.3e})</text>"#,
        escape(title)
    );
    for ((r, c), &v) in values.indexed_iter() {
        let t = if v.is_finite() { (v - lo) / span } else { 0.0 };
        let shade = |full: f64| (255.0 - t * (255.0 - full)).round() as u8;
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{cell_w:.2}" height="{cell_h:.2}" fill="rgb({},{},{})"/>"#,
            10.0 + c as f64 * cell_w,
            TITLE_HEIGHT + r as f64 * cell_h,
            shade(8.0),
            shade(48.0),
            shade(107.0)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One named row of a segmentation plot.
#[derive(Debug, Clone, Copy)]
pub struct Band<'a> {
    pub name: &'a str,
    pub labels: &'a [usize],
}

/// Stacked framewise segmentations, one colored band per row.
pub fn segmentation_svg(bands: &[Band<'_>], title: &str) -> String {
    const BAND_HEIGHT: f64 = 28.0;
    const GAP: f64 = 8.0;
    let frames = bands.iter().map(|b| b.labels.len()).max().unwrap_or(0).max(1);
    let scale = PLOT_WIDTH / frames as f64;
    let width = LABEL_WIDTH + PLOT_WIDTH + 10.0;
    let height = TITLE_HEIGHT + bands.len() as f64 * (BAND_HEIGHT + GAP) + 4.0;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.1} {height:.1}">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="10" y="16" font-family="sans-serif" font-size="13">{}</text>"#,
        escape(title)
    );
    for (row, band) in bands.iter().enumerate() {
        let y = TITLE_HEIGHT + row as f64 * (BAND_HEIGHT + GAP);
        let _ = writeln!(
            s,
            r#"<text x="10" y="{:.1}" font-family="sans-serif" font-size="12">{}</text>"#,
            y + BAND_HEIGHT * 0.65,
            escape(band.name)
        );
        let mut start = 0;
        while start < band.labels.len() {
            let label = band.labels[start];
            let mut end = start;
            while end + 1 < band.labels.len() && band.labels[end + 1] == label {
                end += 1;
            }
            let name = if label == IGNORE {
                "ignore".to_string()
            } else {
                label.to_string()
            };
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{y:.1}" width="{:.2}" height="{BAND_HEIGHT}" fill="{}"><title>{name}: frames {start}-{end}</title></rect>"#,
                LABEL_WIDTH + start as f64 * scale,
                (end - start + 1) as f64 * scale,
                class_color(label)
            );
            start = end + 1;
        }
    }
    s.push_str("</svg>\n");
    s
}
