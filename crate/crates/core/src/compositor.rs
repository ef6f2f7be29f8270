//! Labeled 2×3 composite construction, tiling and image-token accounting.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctag::CameraName;
use crate::geometry::{Composite, CompositeLayout, PxBox, Source, SourceDims};

/// Side of one square tile and of the thumbnail.
pub const TILE_SIZE: u32 = 448;
/// Image tokens produced per tile (and for the thumbnail).
pub const TOKENS_PER_TILE: usize = 256;

const GLYPH_SCALE: u32 = 4;
const GLYPH_W: u32 = 5;
const GLYPH_H: u32 = 7;
const LABEL_PAD: u32 = 6;
/// Height of the black label strip in source pixels.
pub const LABEL_STRIP_H: u32 = GLYPH_H * GLYPH_SCALE + 2 * LABEL_PAD;

const LABEL_FG: Rgb<u8> = Rgb([255, 255, 255]);
const LABEL_BG: Rgb<u8> = Rgb([0, 0, 0]);

#[derive(Debug, Error)]
pub enum ComposeError {
    #[error("expected one view per camera, got {present:?}")]
    CameraSet { present: Vec<CameraName> },
    #[error("{camera} view is empty")]
    EmptyView { camera: CameraName },
    #[error("composite must be {expected:?}, got {actual:?}")]
    CompositeDims {
        expected: (u32, u32),
        actual: (u32, u32),
    },
    #[error("expected {expected} tiles, got {actual}")]
    TileCount { expected: usize, actual: usize },
    #[error("failed to read {path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("failed to write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to encode {path}: {source}")]
    Encode {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// Integer pixel rectangle, `x..x+w` by `y..y+h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl PixelRect {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    pub fn as_box(&self) -> PxBox<Source> {
        PxBox::new(
            f64::from(self.x),
            f64::from(self.y),
            f64::from(self.x + self.w),
            f64::from(self.y + self.h),
        )
    }
}

/// One camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewImage {
    pub camera: CameraName,
    pub pixels: RgbImage,
    /// Where the orientation label was stamped, once it has been.
    pub label_box: Option<PixelRect>,
}

impl ViewImage {
    pub fn new(camera: CameraName, pixels: RgbImage) -> Self {
        Self {
            camera,
            pixels,
            label_box: None,
        }
    }

    pub fn open(camera: CameraName, path: &Path) -> Result<Self, ComposeError> {
        let pixels = image::open(path)
            .map_err(|source| ComposeError::Decode {
                path: path.display().to_string(),
                source,
            })?
            .to_rgb8();
        Ok(Self::new(camera, pixels))
    }

    pub fn dims(&self) -> SourceDims {
        SourceDims {
            camera: self.camera,
            width: self.pixels.width(),
            height: self.pixels.height(),
        }
    }
}

/// The six labeled views placed on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeImage {
    pub pixels: RgbImage,
    pub layout: CompositeLayout,
    /// Label strips mapped into composite pixels, in camera order.
    pub label_boxes: Vec<(CameraName, PxBox<Composite>)>,
}

/// Twelve grid tiles plus a whole-image thumbnail.
#[derive(Debug, Clone, PartialEq)]
pub struct TileSet {
    /// Row-major over the composite.
    pub tiles: Vec<RgbImage>,
    pub thumbnail: RgbImage,
    pub tokens_per_tile: usize,
}

/// Draw the camera name in white on a black strip at the top-left corner.
///
/// The strip is clipped to the image. Stamping is an opaque overwrite so
/// repeating it changes nothing.
pub fn stamp_label(img: &ViewImage) -> ViewImage {
    let mut out = img.clone();
    let text = img.camera.as_str();
    let advance = (GLYPH_W + 1) * GLYPH_SCALE;
    let full_w = text.len() as u32 * advance - GLYPH_SCALE + 2 * LABEL_PAD;
    let (iw, ih) = out.pixels.dimensions();
    let rect = PixelRect {
        x: 0,
        y: 0,
        w: full_w.min(iw),
        h: LABEL_STRIP_H.min(ih),
    };

    for y in 0..rect.h {
        for x in 0..rect.w {
            out.pixels.put_pixel(x, y, LABEL_BG);
        }
    }
    for (i, ch) in text.chars().enumerate() {
        let rows = glyph(ch);
        let gx = LABEL_PAD + i as u32 * advance;
        for (ry, bits) in rows.iter().enumerate() {
            for rx in 0..GLYPH_W {
                if bits & (1 << (GLYPH_W - 1 - rx)) == 0 {
                    continue;
                }
                for dy in 0..GLYPH_SCALE {
                    for dx in 0..GLYPH_SCALE {
                        let x = gx + rx * GLYPH_SCALE + dx;
                        let y = LABEL_PAD + ry as u32 * GLYPH_SCALE + dy;
                        if x < rect.w && y < rect.h {
                            out.pixels.put_pixel(x, y, LABEL_FG);
                        }
                    }
                }
            }
        }
    }
    out.label_box = Some(rect);
    out
}

/// Label, resize and place six views into one composite.
pub fn compose(views: &[ViewImage], layout: &CompositeLayout) -> Result<CompositeImage, ComposeError> {
    let mut by_camera: [Option<&ViewImage>; 6] = Default::default();
    let mut valid = views.len() == 6;
    for v in views {
        let slot = &mut by_camera[v.camera.index()];
        if slot.is_some() {
            valid = false;
        }
        *slot = Some(v);
    }
    if !valid || by_camera.iter().any(Option::is_none) {
        return Err(ComposeError::CameraSet {
            present: views.iter().map(|v| v.camera).collect(),
        });
    }

    let mut pixels = RgbImage::new(layout.composite_w(), layout.composite_h());
    let mut label_boxes = Vec::with_capacity(6);
    for view in by_camera.into_iter().flatten() {
        if view.pixels.width() == 0 || view.pixels.height() == 0 {
            return Err(ComposeError::EmptyView { camera: view.camera });
        }
        let labeled = stamp_label(view);
        let resized = imageops::resize(
            &labeled.pixels,
            layout.view_w(),
            layout.view_h(),
            FilterType::Triangle,
        );
        let (ox, oy) = layout.cell_origin(view.camera);
        imageops::replace(&mut pixels, &resized, i64::from(ox), i64::from(oy));

        let rect = labeled.label_box.expect("stamped");
        let mapped = layout
            .box_to_composite(rect.as_box(), &labeled.dims())
            .expect("label strip lies inside its view");
        label_boxes.push((view.camera, mapped));
    }
    Ok(CompositeImage {
        pixels,
        layout: *layout,
        label_boxes,
    })
}

/// Cut the composite on the exact tile grid and add a thumbnail.
pub fn tile(c: &CompositeImage) -> Result<TileSet, ComposeError> {
    let expected = (c.layout.composite_w(), c.layout.composite_h());
    let actual = c.pixels.dimensions();
    if actual != expected || expected.0 % TILE_SIZE != 0 || expected.1 % TILE_SIZE != 0 {
        return Err(ComposeError::CompositeDims { expected, actual });
    }
    let mut tiles = Vec::new();
    for ty in 0..actual.1 / TILE_SIZE {
        for tx in 0..actual.0 / TILE_SIZE {
            let tile = imageops::crop_imm(
                &c.pixels,
                tx * TILE_SIZE,
                ty * TILE_SIZE,
                TILE_SIZE,
                TILE_SIZE,
            )
            .to_image();
            tiles.push(tile);
        }
    }
    let thumbnail = imageops::resize(&c.pixels, TILE_SIZE, TILE_SIZE, FilterType::Triangle);
    Ok(TileSet {
        tiles,
        thumbnail,
        tokens_per_tile: TOKENS_PER_TILE,
    })
}

/// Reassemble row-major tiles into a composite of the given layout.
pub fn stitch(tiles: &[RgbImage], layout: &CompositeLayout) -> Result<RgbImage, ComposeError> {
    let per_row = layout.composite_w() / TILE_SIZE;
    let expected = (per_row * (layout.composite_h() / TILE_SIZE)) as usize;
    if tiles.len() != expected {
        return Err(ComposeError::TileCount {
            expected,
            actual: tiles.len(),
        });
    }
    let mut out = RgbImage::new(layout.composite_w(), layout.composite_h());
    for (i, t) in tiles.iter().enumerate() {
        let (tx, ty) = (i as u32 % per_row, i as u32 / per_row);
        imageops::replace(
            &mut out,
            t,
            i64::from(tx * TILE_SIZE),
            i64::from(ty * TILE_SIZE),
        );
    }
    Ok(out)
}

/// Image tokens for all tiles plus the thumbnail.
pub fn count_tokens(t: &TileSet) -> usize {
    (t.tiles.len() + 1) * t.tokens_per_tile
}

/// Encode `img` as PNG at `path` through a temporary file and rename.
///
/// Returns the encoded bytes so callers can checksum them.
pub fn save_png(img: &RgbImage, path: &Path) -> Result<Vec<u8>, ComposeError> {
    use std::io::Write;

    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|source| ComposeError::Encode {
            path: path.display().to_string(),
            source,
        })?;
    let write_err = |source| ComposeError::Write {
        path: path.display().to_string(),
        source,
    };
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(write_err)?;
    tmp.write_all(&bytes).map_err(write_err)?;
    tmp.persist(path).map_err(|e| write_err(e.error))?;
    Ok(bytes)
}

fn glyph(ch: char) -> [u8; 7] {
    match ch {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        _ => [0x00; 7],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const L: CompositeLayout = CompositeLayout::STANDARD;

    fn solid(camera: CameraName, w: u32, h: u32, color: [u8; 3]) -> ViewImage {
        ViewImage::new(camera, RgbImage::from_pixel(w, h, Rgb(color)))
    }

    fn color_of(camera: CameraName) -> [u8; 3] {
        let i = camera.index() as u8;
        [40 * i + 20, 200 - 30 * i, 90 + 25 * i]
    }

    fn six_solid(w: u32, h: u32) -> Vec<ViewImage> {
        CameraName::ALL
            .iter()
            .map(|&c| solid(c, w, h, color_of(c)))
            .collect()
    }

    #[test]
    fn stamp_only_touches_label_box() {
        let view = solid(CameraName::FrontRight, 1600, 900, [10, 120, 200]);
        let stamped = stamp_label(&view);
        let rect = stamped.label_box.unwrap();
        for (x, y, p) in stamped.pixels.enumerate_pixels() {
            if !rect.contains(x, y) {
                assert_eq!(*p, Rgb([10, 120, 200]));
            }
        }
        assert_ne!(stamped.pixels, view.pixels);
        // Strip stays within the top tenth of a nuScenes-sized frame.
        assert!(rect.y + rect.h <= 90);
        assert_eq!(rect.h, 40);
    }

    #[test]
    fn stamp_is_idempotent() {
        let view = solid(CameraName::Back, 640, 360, [1, 2, 3]);
        let once = stamp_label(&view);
        let twice = stamp_label(&once);
        assert_eq!(once.pixels, twice.pixels);
        assert_eq!(once.label_box, twice.label_box);
    }

    #[test]
    fn stamp_clips_to_tiny_images() {
        let view = solid(CameraName::BackRight, 10, 5, [9, 9, 9]);
        let stamped = stamp_label(&view);
        assert_eq!(stamped.label_box, Some(PixelRect { x: 0, y: 0, w: 10, h: 5 }));
    }

    #[test]
    fn label_text_is_drawn() {
        let stamped = stamp_label(&solid(CameraName::Front, 800, 450, [0, 0, 0]));
        let white = stamped
            .pixels
            .pixels()
            .filter(|p| **p == LABEL_FG)
            .count();
        assert!(white > 0);
    }

    #[test]
    fn cells_hold_their_view_colors() {
        let comp = compose(&six_solid(1600, 900), &L).unwrap();
        assert_eq!(comp.pixels.dimensions(), (2688, 896));
        for cam in CameraName::ALL {
            let (ox, oy) = L.cell_origin(cam);
            let center = comp.pixels.get_pixel(ox + 448, oy + 224);
            assert_eq!(center.0, color_of(cam), "{cam}");
        }
    }

    #[test]
    fn cell_interiors_outside_labels_are_solid() {
        let comp = compose(&six_solid(1600, 900), &L).unwrap();
        for &(cam, lb) in &comp.label_boxes {
            let (ox, oy) = L.cell_origin(cam);
            for y in oy..oy + L.view_h() {
                for x in ox..ox + L.view_w() {
                    let (fx, fy) = (f64::from(x), f64::from(y));
                    // Allow the resize filter's reach around the strip.
                    let near_label = fx < lb.x2 + 2.0 && fy < lb.y2 + 2.0;
                    if !near_label {
                        assert_eq!(comp.pixels.get_pixel(x, y).0, color_of(cam));
                    }
                }
            }
        }
    }

    #[test]
    fn compose_rejects_bad_camera_sets() {
        let mut views = six_solid(32, 16);
        views.pop();
        assert!(matches!(compose(&views, &L), Err(ComposeError::CameraSet { .. })));
        let mut views = six_solid(32, 16);
        views[5].camera = CameraName::Front;
        assert!(matches!(compose(&views, &L), Err(ComposeError::CameraSet { .. })));
    }

    #[test]
    fn composite_size_is_fixed_for_any_input_size() {
        for (w, h) in [(1, 1), (37, 1200), (1600, 900), (2000, 100)] {
            let comp = compose(&six_solid(w, h), &L).unwrap();
            assert_eq!(comp.pixels.dimensions(), (2688, 896));
        }
    }

    #[test]
    fn tiles_stitch_back_exactly() {
        let mut comp = compose(&six_solid(200, 100), &L).unwrap();
        for (i, p) in comp.pixels.pixels_mut().enumerate() {
            p.0[0] = (i % 251) as u8;
        }
        let set = tile(&comp).unwrap();
        assert_eq!(set.tiles.len(), 12);
        assert!(set.tiles.iter().all(|t| t.dimensions() == (448, 448)));
        assert_eq!(set.thumbnail.dimensions(), (448, 448));
        assert_eq!(stitch(&set.tiles, &L).unwrap(), comp.pixels);
        assert_eq!(count_tokens(&set), 3328);
    }

    #[test]
    fn each_view_spans_two_tiles() {
        for cam in CameraName::ALL {
            let (ox, oy) = L.cell_origin(cam);
            let covering: Vec<u32> = (0..12u32)
                .filter(|i| {
                    let (tx, ty) = ((i % 6) * TILE_SIZE, (i / 6) * TILE_SIZE);
                    tx < ox + L.view_w() && tx + TILE_SIZE > ox && ty < oy + L.view_h() && ty + TILE_SIZE > oy
                })
                .collect();
            assert_eq!(covering.len(), 2, "{cam}");
        }
    }

    #[test]
    fn tile_rejects_wrong_dims() {
        let comp = CompositeImage {
            pixels: RgbImage::new(100, 100),
            layout: L,
            label_boxes: vec![],
        };
        assert!(matches!(tile(&comp), Err(ComposeError::CompositeDims { .. })));
    }

    #[test]
    fn token_count_is_linear_in_tiles() {
        let mut set = TileSet {
            tiles: vec![],
            thumbnail: RgbImage::new(1, 1),
            tokens_per_tile: TOKENS_PER_TILE,
        };
        assert_eq!(count_tokens(&set), 256);
        for n in 1..=12 {
            set.tiles.push(RgbImage::new(1, 1));
            assert_eq!(count_tokens(&set), (n + 1) * 256);
        }
    }
}
