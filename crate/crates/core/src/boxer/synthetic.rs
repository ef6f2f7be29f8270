//! Connected-component mask provider for desk-scale runs and tests.
//!
//! Pixels with luma above 127 are foreground. The component under the
//! prompt (if any) comes first, followed by the `k` other components whose
//! centroids are closest to the prompt.

use std::path::{Path, PathBuf};

use image::RgbImage;

use super::rle::rle_encode;
use super::{MaskCandidate, MaskProvider, MaskRequest, ProviderError};
use crate::geometry::{PxBox, PxPoint, Source};

pub const DEFAULT_K_NEAREST: usize = 2;

#[derive(Debug, Clone)]
struct Component {
    area: u64,
    min: (u32, u32),
    max: (u32, u32),
    sum: (f64, f64),
}

impl Component {
    fn centroid(&self) -> (f64, f64) {
        let n = self.area as f64;
        (self.sum.0 / n + 0.5, self.sum.1 / n + 0.5)
    }
}

/// 4-connected labeling; label 0 is background, components are numbered
/// in raster order of their first pixel.
#[derive(Debug, Clone)]
struct Labeling {
    width: u32,
    height: u32,
    labels: Vec<u32>,
    components: Vec<Component>,
}

impl Labeling {
    fn new(img: &RgbImage) -> Self {
        let (width, height) = img.dimensions();
        let fg: Vec<bool> = img
            .pixels()
            .map(|p| {
                let [r, g, b] = p.0;
                (299 * u32::from(r) + 587 * u32::from(g) + 114 * u32::from(b) + 500) / 1000 > 127
            })
            .collect();
        let mut labels = vec![0u32; fg.len()];
        let mut components = Vec::new();
        let mut stack = Vec::new();
        let w = width as usize;
        for start in 0..fg.len() {
            if !fg[start] || labels[start] != 0 {
                continue;
            }
            let label = components.len() as u32 + 1;
            let mut comp = Component {
                area: 0,
                min: (u32::MAX, u32::MAX),
                max: (0, 0),
                sum: (0.0, 0.0),
            };
            labels[start] = label;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let (x, y) = ((i % w) as u32, (i / w) as u32);
                comp.area += 1;
                comp.min = (comp.min.0.min(x), comp.min.1.min(y));
                comp.max = (comp.max.0.max(x), comp.max.1.max(y));
                comp.sum.0 += f64::from(x);
                comp.sum.1 += f64::from(y);
                let mut visit = |j: usize| {
                    if fg[j] && labels[j] == 0 {
                        labels[j] = label;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < width {
                    visit(i + 1);
                }
                if y > 0 {
                    visit(i - w);
                }
                if y + 1 < height {
                    visit(i + w);
                }
            }
            components.push(comp);
        }
        Self {
            width,
            height,
            labels,
            components,
        }
    }

    fn label_at(&self, p: PxPoint<Source>) -> Option<u32> {
        if p.x < 0.0 || p.y < 0.0 {
            return None;
        }
        let (x, y) = (p.x.floor() as u32, p.y.floor() as u32);
        if x >= self.width || y >= self.height {
            return None;
        }
        match self.labels[(y * self.width + x) as usize] {
            0 => None,
            l => Some(l),
        }
    }

    fn candidates(&self, point: PxPoint<Source>, k_nearest: usize) -> Vec<MaskCandidate> {
        let hit = self.label_at(point);
        let mut others: Vec<(f64, u32)> = self
            .components
            .iter()
            .enumerate()
            .map(|(i, c)| (i as u32 + 1, c))
            .filter(|(l, _)| Some(*l) != hit)
            .map(|(l, c)| {
                let (cx, cy) = c.centroid();
                ((cx - point.x).hypot(cy - point.y), l)
            })
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        hit.into_iter()
            .chain(others.into_iter().take(k_nearest).map(|(_, l)| l))
            .map(|label| self.candidate(label, Some(label) == hit))
            .collect()
    }

    fn candidate(&self, label: u32, contains_prompt: bool) -> MaskCandidate {
        let c = &self.components[label as usize - 1];
        MaskCandidate {
            area_px: c.area,
            bbox: PxBox::new(
                f64::from(c.min.0),
                f64::from(c.min.1),
                f64::from(c.max.0 + 1),
                f64::from(c.max.1 + 1),
            ),
            contains_prompt,
            rle: Some(rle_encode(self.labels.iter().map(|&l| l == label))),
        }
    }
}

/// Candidate masks for `point` on `img`. Pure; may be empty.
pub fn synthetic_candidates(img: &RgbImage, point: PxPoint<Source>, k_nearest: usize) -> Vec<MaskCandidate> {
    Labeling::new(img).candidates(point, k_nearest)
}

/// [`MaskProvider`] over image files, caching the last labeling.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    pub k_nearest: usize,
    cache: Option<(PathBuf, Labeling)>,
}

impl Default for SyntheticProvider {
    fn default() -> Self {
        Self::new(DEFAULT_K_NEAREST)
    }
}

impl SyntheticProvider {
    pub fn new(k_nearest: usize) -> Self {
        Self {
            k_nearest,
            cache: None,
        }
    }

    /// Candidates on an in-memory image, bypassing the file cache.
    pub fn candidates_for(&self, img: &RgbImage, point: PxPoint<Source>) -> Vec<MaskCandidate> {
        synthetic_candidates(img, point, self.k_nearest)
    }

    fn labeling(&mut self, path: &Path) -> Result<&Labeling, ProviderError> {
        let fresh = !matches!(&self.cache, Some((p, _)) if p == path);
        if fresh {
            let img = image::open(path)
                .map_err(|e| ProviderError::Image {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?
                .to_rgb8();
            self.cache = Some((path.to_path_buf(), Labeling::new(&img)));
        }
        Ok(&self.cache.as_ref().expect("filled above").1)
    }
}

impl MaskProvider for SyntheticProvider {
    fn candidates(&mut self, request: &MaskRequest<'_>) -> Result<Vec<MaskCandidate>, ProviderError> {
        let k = self.k_nearest;
        let labeling = self.labeling(request.image)?;
        let p = request.point;
        if !(p.x >= 0.0 && p.y >= 0.0 && p.x < f64::from(labeling.width) && p.y < f64::from(labeling.height)) {
            return Err(ProviderError::Remote(format!(
                "point ({}, {}) outside the {}x{} image",
                p.x, p.y, labeling.width, labeling.height
            )));
        }
        Ok(labeling.candidates(p, k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxer::rle::{rle_decode, tight_box};
    use image::Rgb;
    use proptest::prelude::*;

    fn with_rects(w: u32, h: u32, rects: &[(u32, u32, u32, u32)]) -> RgbImage {
        let mut img = RgbImage::new(w, h);
        for &(x, y, rw, rh) in rects {
            for yy in y..(y + rh).min(h) {
                for xx in x..(x + rw).min(w) {
                    img.put_pixel(xx, yy, Rgb([255, 255, 255]));
                }
            }
        }
        img
    }

    #[test]
    fn black_image_gives_nothing() {
        assert!(synthetic_candidates(&RgbImage::new(30, 20), PxPoint::new(5.0, 5.0), 2).is_empty());
    }

    #[test]
    fn single_rectangle() {
        let img = with_rects(50, 40, &[(7, 9, 13, 5)]);
        let c = synthetic_candidates(&img, PxPoint::new(10.0, 10.0), 2);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].area_px, 65);
        assert_eq!(c[0].bbox, PxBox::new(7.0, 9.0, 20.0, 14.0));
        assert!(c[0].contains_prompt);
    }

    #[test]
    fn diagonal_pixels_are_separate_components() {
        let img = with_rects(4, 4, &[(0, 0, 1, 1), (1, 1, 1, 1)]);
        let c = synthetic_candidates(&img, PxPoint::new(0.5, 0.5), 5);
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn dim_pixels_are_background() {
        let mut img = RgbImage::new(4, 4);
        img.put_pixel(1, 1, Rgb([127, 127, 127]));
        img.put_pixel(2, 2, Rgb([128, 128, 128]));
        let c = synthetic_candidates(&img, PxPoint::new(1.5, 1.5), 5);
        assert_eq!(c.len(), 1);
        assert!(!c[0].contains_prompt);
    }

    #[test]
    fn k_limits_extra_candidates() {
        let rects: Vec<_> = (0..6).map(|i| (i * 10, 0, 5, 5)).collect();
        let img = with_rects(80, 10, &rects);
        assert_eq!(synthetic_candidates(&img, PxPoint::new(1.0, 1.0), 2).len(), 3);
        assert_eq!(synthetic_candidates(&img, PxPoint::new(8.0, 8.0), 2).len(), 2);
        assert_eq!(synthetic_candidates(&img, PxPoint::new(8.0, 8.0), 0).len(), 0);
    }

    /// Pixel-scan oracle for one component's area and tight box.
    fn flood_oracle(img: &RgbImage, seed: (u32, u32)) -> (u64, PxBox<Source>) {
        let (w, h) = img.dimensions();
        let on = |x: u32, y: u32| img.get_pixel(x, y).0[0] > 127;
        let mut seen = vec![vec![false; w as usize]; h as usize];
        let mut frontier = vec![seed];
        seen[seed.1 as usize][seed.0 as usize] = true;
        let mut members = vec![];
        while let Some((x, y)) = frontier.pop() {
            members.push((x, y));
            let n = [
                (x.wrapping_sub(1), y),
                (x + 1, y),
                (x, y.wrapping_sub(1)),
                (x, y + 1),
            ];
            for (nx, ny) in n {
                if nx < w && ny < h && on(nx, ny) && !seen[ny as usize][nx as usize] {
                    seen[ny as usize][nx as usize] = true;
                    frontier.push((nx, ny));
                }
            }
        }
        let x0 = members.iter().map(|m| m.0).min().unwrap();
        let y0 = members.iter().map(|m| m.1).min().unwrap();
        let x1 = members.iter().map(|m| m.0).max().unwrap();
        let y1 = members.iter().map(|m| m.1).max().unwrap();
        (
            members.len() as u64,
            PxBox::new(f64::from(x0), f64::from(y0), f64::from(x1 + 1), f64::from(y1 + 1)),
        )
    }

    proptest! {
        #[test]
        fn candidates_match_pixel_scan(
            rects in prop::collection::vec((0u32..40, 0u32..30, 1u32..12, 1u32..12), 1..6),
            px in 0u32..48, py in 0u32..36,
        ) {
            let img = with_rects(48, 36, &rects);
            let point = PxPoint::new(f64::from(px) + 0.5, f64::from(py) + 0.5);
            let cands = synthetic_candidates(&img, point, 2);
            let on_fg = img.get_pixel(px, py).0[0] > 127;
            prop_assert_eq!(cands.first().map_or(false, |c| c.contains_prompt), on_fg);
            if on_fg {
                let (area, bbox) = flood_oracle(&img, (px, py));
                prop_assert_eq!(cands[0].area_px, area);
                prop_assert_eq!(cands[0].bbox, bbox);
            }
            for c in &cands {
                let mask = rle_decode(c.rle.as_ref().unwrap(), 48, 36).unwrap();
                prop_assert_eq!(mask.iter().filter(|&&m| m).count() as u64, c.area_px);
                prop_assert_eq!(tight_box(&mask, 48).unwrap(), c.bbox);
                prop_assert!(c.validate(48, 36, point).is_ok());
            }
        }
    }
}
