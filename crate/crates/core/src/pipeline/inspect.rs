//! Drawing converted boxes back onto their composite.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader};
use std::path::Path;

use image::{Rgb, RgbImage};
use thiserror::Error;

use crate::ctag::{parse_tags, TagGeometry};
use crate::geometry::{CompositeLayout, NormBox};

use super::convert::ConversationRecord;

pub const BOX_COLOR: Rgb<u8> = Rgb([255, 32, 32]);
pub const BOX_THICKNESS: u32 = 3;

#[derive(Debug, Error)]
pub enum InspectError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Record { path: String, line: usize, message: String },
    #[error("no record {0:?}")]
    NotFound(String),
    #[error("cannot load composite {path}: {message}")]
    Image { path: String, message: String },
}

/// Find `sample_id` in a records file.
pub fn find_record(records: &Path, sample_id: &str) -> Result<ConversationRecord, InspectError> {
    let io_err = |source| InspectError::Io {
        path: records.display().to_string(),
        source,
    };
    let file = std::fs::File::open(records).map_err(io_err)?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ConversationRecord = serde_json::from_str(&line).map_err(|e| InspectError::Record {
            path: records.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.sample_id == sample_id {
            return Ok(rec);
        }
    }
    Err(InspectError::NotFound(sample_id.to_string()))
}

/// Every normalized box referenced by the record, deduplicated.
pub fn record_boxes(rec: &ConversationRecord) -> Vec<NormBox> {
    let mut out = BTreeSet::new();
    for text in [&rec.user_text, &rec.assistant_text] {
        let Ok(parsed) = parse_tags(text) else { continue };
        for tag in parsed.tags() {
            if let TagGeometry::BoxNorm { x1, y1, x2, y2 } = tag.geometry {
                out.insert((x1, y1, x2, y2));
            }
        }
    }
    out.into_iter()
        .filter_map(|(x1, y1, x2, y2)| NormBox::new(x1, y1, x2, y2).ok())
        .collect()
}

/// Inclusive pixel corners of a normalized box on the composite.
pub fn pixel_rect(b: NormBox, layout: &CompositeLayout) -> (u32, u32, u32, u32) {
    let px = layout.denormalize(b);
    let (w, h) = (layout.composite_w(), layout.composite_h());
    let clamp = |v: f64, max: u32| (v.max(0.0) as u32).min(max - 1);
    let (x1, y1) = (clamp(px.x1.floor(), w), clamp(px.y1.floor(), h));
    let x2 = clamp(px.x2.ceil() - 1.0, w).max(x1);
    let y2 = clamp(px.y2.ceil() - 1.0, h).max(y1);
    (x1, y1, x2, y2)
}

/// Outline each box, growing inward by `thickness` pixels.
pub fn draw_boxes(img: &mut RgbImage, boxes: &[NormBox], layout: &CompositeLayout, color: Rgb<u8>, thickness: u32) {
    for &b in boxes {
        let (x1, y1, x2, y2) = pixel_rect(b, layout);
        for y in y1..=y2 {
            for x in x1..=x2 {
                let edge = x - x1 < thickness || x2 - x < thickness || y - y1 < thickness || y2 - y < thickness;
                if edge && x < img.width() && y < img.height() {
                    img.put_pixel(x, y, color);
                }
            }
        }
    }
}

/// The record's composite with its boxes drawn on it.
pub fn render_record(out_dir: &Path, rec: &ConversationRecord) -> Result<RgbImage, InspectError> {
    let path = out_dir.join(&rec.composite_image);
    let mut img = image::open(&path)
        .map_err(|e| InspectError::Image {
            path: path.display().to_string(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let layout = CompositeLayout::STANDARD;
    draw_boxes(&mut img, &record_boxes(rec), &layout, BOX_COLOR, BOX_THICKNESS);
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_covers_the_denormalized_box() {
        let l = CompositeLayout::STANDARD;
        // 500 * 2.688 = 1344, 250 * 0.896 = 224, 600 * 2.688 = 1612.8, 500 * 0.896 = 448
        assert_eq!(pixel_rect(NormBox::new(500, 250, 600, 500).unwrap(), &l), (1344, 224, 1612, 447));
        assert_eq!(pixel_rect(NormBox::new(0, 0, 1000, 1000).unwrap(), &l), (0, 0, 2687, 895));
    }

    #[test]
    fn outline_leaves_the_interior() {
        let l = CompositeLayout::STANDARD;
        let mut img = RgbImage::new(2688, 896);
        draw_boxes(&mut img, &[NormBox::new(500, 250, 600, 500).unwrap()], &l, BOX_COLOR, 2);
        assert_eq!(*img.get_pixel(1344, 224), BOX_COLOR);
        assert_eq!(*img.get_pixel(1612, 447), BOX_COLOR);
        assert_eq!(*img.get_pixel(1345, 225), BOX_COLOR);
        assert_eq!(*img.get_pixel(1346, 226), Rgb([0, 0, 0]));
        assert_eq!(*img.get_pixel(1343, 224), Rgb([0, 0, 0]));
    }
}
