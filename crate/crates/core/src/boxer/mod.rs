//! Center point to bounding box conversion.
//!
//! A mask provider is prompted with the object's center point and returns
//! candidate masks. The largest candidate is always chosen; flags record
//! results that are likely wrong without overriding the choice.

mod rle;
pub mod sidecar;
mod synthetic;

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{PxBox, PxPoint, Source, SourceDims};

pub use rle::{rle_decode, rle_encode};
pub use sidecar::{SidecarOptions, SidecarProvider};
pub use synthetic::{synthetic_candidates, SyntheticProvider, DEFAULT_K_NEAREST};

/// Fraction of the view area above which a chosen mask is flagged.
pub const OVERSIZED_FRACTION: f64 = 0.9;

/// One candidate mask for a point prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskCandidate {
    pub area_px: u64,
    /// Tight box, `x2`/`y2` exclusive.
    pub bbox: PxBox<Source>,
    pub contains_prompt: bool,
    /// Row-major run lengths, starting with a run of zeros.
    pub rle: Option<Vec<u64>>,
}

impl MaskCandidate {
    /// Check the candidate against its own mask and the image size.
    pub fn validate(&self, width: u32, height: u32, prompt: PxPoint<Source>) -> Result<(), String> {
        if self.area_px == 0 {
            return Err("area must be at least 1".into());
        }
        if self.bbox.x1 < 0.0
            || self.bbox.y1 < 0.0
            || self.bbox.x2 > f64::from(width)
            || self.bbox.y2 > f64::from(height)
        {
            return Err("bbox outside the image".into());
        }
        let Some(rle) = &self.rle else {
            return Ok(());
        };
        let mask = rle_decode(rle, width, height)?;
        let area = mask.iter().filter(|&&m| m).count() as u64;
        if area != self.area_px {
            return Err(format!("rle area {area} != declared {}", self.area_px));
        }
        let tight = rle::tight_box(&mask, width).ok_or("empty mask")?;
        if tight != self.bbox {
            return Err(format!("rle tight box {tight:?} != declared {:?}", self.bbox));
        }
        let (px, py) = (prompt.x.floor() as u32, prompt.y.floor() as u32);
        let inside = px < width && py < height && mask[(py * width + px) as usize];
        if inside != self.contains_prompt {
            return Err("contains_prompt disagrees with the mask".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BoxFlag {
    /// Chosen mask covers more than 90% of the view.
    SuspectOversized,
    /// Chosen mask does not contain the prompt point.
    PromptOutsideMask,
    /// The provider returned a single candidate.
    SingleCandidate,
}

impl fmt::Display for BoxFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoxFlag::SuspectOversized => "SUSPECT_OVERSIZED",
            BoxFlag::PromptOutsideMask => "PROMPT_OUTSIDE_MASK",
            BoxFlag::SingleCandidate => "SINGLE_CANDIDATE",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxResult {
    pub bbox: PxBox<Source>,
    pub chosen_index: usize,
    pub area_px: u64,
    pub flags: BTreeSet<BoxFlag>,
}

/// The image a prompt refers to.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRef {
    pub id: String,
    pub image: PathBuf,
    pub dims: SourceDims,
}

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("no response within {0:?}")]
    Timeout(std::time::Duration),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("provider reported: {0}")]
    Remote(String),
    #[error("provider i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot load {path}: {message}")]
    Image { path: String, message: String },
}

#[derive(Debug, Error)]
pub enum BoxError {
    #[error("no candidate masks")]
    NoCandidates,
    #[error("sample {sample_id}: no candidate masks for the prompt")]
    NoCandidatesFor { sample_id: String },
    #[error("sample {sample_id}: prompt ({x}, {y}) outside the {width}x{height} image")]
    PromptOutside {
        sample_id: String,
        x: f64,
        y: f64,
        width: u32,
        height: u32,
    },
    #[error("sample {sample_id}: candidate {index} is invalid: {reason}")]
    InvalidCandidate {
        sample_id: String,
        index: usize,
        reason: String,
    },
    #[error("sample {sample_id}: {source}")]
    Provider {
        sample_id: String,
        #[source]
        source: ProviderError,
    },
}

/// A request to a mask provider.
#[derive(Debug, Clone, Copy)]
pub struct MaskRequest<'a> {
    pub id: &'a str,
    pub image: &'a std::path::Path,
    pub point: PxPoint<Source>,
}

/// Anything that turns a point prompt into candidate masks.
///
/// Sessions are stateful and owned by one worker at a time.
pub trait MaskProvider {
    fn candidates(&mut self, request: &MaskRequest<'_>) -> Result<Vec<MaskCandidate>, ProviderError>;
}

impl<P: MaskProvider + ?Sized> MaskProvider for Box<P> {
    fn candidates(&mut self, request: &MaskRequest<'_>) -> Result<Vec<MaskCandidate>, ProviderError> {
        (**self).candidates(request)
    }
}

/// Pick the candidate with the largest area; ties go to the lowest index.
pub fn select_largest(cands: &[MaskCandidate]) -> Result<BoxResult, BoxError> {
    let (chosen_index, chosen) = cands
        .iter()
        .enumerate()
        .fold(None::<(usize, &MaskCandidate)>, |best, (i, c)| match best {
            Some((_, b)) if b.area_px >= c.area_px => best,
            _ => Some((i, c)),
        })
        .ok_or(BoxError::NoCandidates)?;

    let mut flags = BTreeSet::new();
    if !chosen.contains_prompt {
        flags.insert(BoxFlag::PromptOutsideMask);
    }
    if cands.len() == 1 {
        flags.insert(BoxFlag::SingleCandidate);
    }
    Ok(BoxResult {
        bbox: chosen.bbox,
        chosen_index,
        area_px: chosen.area_px,
        flags,
    })
}

/// Prompt `provider` with `point` and keep the largest mask's box.
pub fn center_to_box(
    point: PxPoint<Source>,
    sample: &SampleRef,
    provider: &mut dyn MaskProvider,
) -> Result<BoxResult, BoxError> {
    let SourceDims { width, height, .. } = sample.dims;
    if !(point.x >= 0.0 && point.x < f64::from(width) && point.y >= 0.0 && point.y < f64::from(height)) {
        return Err(BoxError::PromptOutside {
            sample_id: sample.id.clone(),
            x: point.x,
            y: point.y,
            width,
            height,
        });
    }
    let request = MaskRequest {
        id: &sample.id,
        image: &sample.image,
        point,
    };
    let cands = provider
        .candidates(&request)
        .map_err(|source| BoxError::Provider {
            sample_id: sample.id.clone(),
            source,
        })?;
    for (index, c) in cands.iter().enumerate() {
        c.validate(width, height, point)
            .map_err(|reason| BoxError::InvalidCandidate {
                sample_id: sample.id.clone(),
                index,
                reason,
            })?;
    }
    let mut result = select_largest(&cands).map_err(|_| BoxError::NoCandidatesFor {
        sample_id: sample.id.clone(),
    })?;
    let view_area = f64::from(width) * f64::from(height);
    if result.area_px as f64 > OVERSIZED_FRACTION * view_area {
        result.flags.insert(BoxFlag::SuspectOversized);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctag::CameraName;
    use image::{Rgb, RgbImage};
    use proptest::prelude::*;

    fn cand(area: u64, contains_prompt: bool) -> MaskCandidate {
        MaskCandidate {
            area_px: area,
            bbox: PxBox::new(0.0, 0.0, 1.0, 1.0),
            contains_prompt,
            rle: None,
        }
    }

    #[test]
    fn picks_the_largest() {
        let r = select_largest(&[cand(10, true), cand(50, true), cand(30, true)]).unwrap();
        assert_eq!(r.chosen_index, 1);
        assert!(r.flags.is_empty());
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let r = select_largest(&[cand(50, true), cand(50, true)]).unwrap();
        assert_eq!(r.chosen_index, 0);
    }

    #[test]
    fn empty_list_is_an_error() {
        assert!(matches!(select_largest(&[]), Err(BoxError::NoCandidates)));
    }

    #[test]
    fn flags_follow_the_chosen_candidate() {
        let r = select_largest(&[cand(5, true), cand(9, false)]).unwrap();
        assert_eq!(r.flags, BTreeSet::from([BoxFlag::PromptOutsideMask]));
        let r = select_largest(&[cand(5, true)]).unwrap();
        assert_eq!(r.flags, BTreeSet::from([BoxFlag::SingleCandidate]));
    }

    proptest! {
        #[test]
        fn matches_linear_scan(areas in prop::collection::vec(1u64..20, 1..12)) {
            let cands: Vec<_> = areas.iter().map(|&a| cand(a, true)).collect();
            let r = select_largest(&cands).unwrap();
            let mut best = 0;
            for i in 1..areas.len() {
                if areas[i] > areas[best] {
                    best = i;
                }
            }
            prop_assert_eq!(r.chosen_index, best);
            prop_assert_eq!(r.area_px, *areas.iter().max().unwrap());
        }
    }

    struct Fixed(Vec<MaskCandidate>);

    impl MaskProvider for Fixed {
        fn candidates(&mut self, _: &MaskRequest<'_>) -> Result<Vec<MaskCandidate>, ProviderError> {
            Ok(self.0.clone())
        }
    }

    struct Failing;

    impl MaskProvider for Failing {
        fn candidates(&mut self, _: &MaskRequest<'_>) -> Result<Vec<MaskCandidate>, ProviderError> {
            Err(ProviderError::Timeout(std::time::Duration::from_secs(60)))
        }
    }

    fn sample(w: u32, h: u32) -> SampleRef {
        SampleRef {
            id: "s0".into(),
            image: "unused.png".into(),
            dims: SourceDims::new(CameraName::Front, w, h).unwrap(),
        }
    }

    #[test]
    fn oversized_masks_are_flagged_but_kept() {
        let mut provider = Fixed(vec![
            MaskCandidate {
                area_px: 91,
                bbox: PxBox::new(0.0, 0.0, 10.0, 10.0),
                contains_prompt: true,
                rle: None,
            },
            cand(4, true),
        ]);
        let r = center_to_box(PxPoint::new(5.0, 5.0), &sample(10, 10), &mut provider).unwrap();
        assert_eq!(r.chosen_index, 0);
        assert_eq!(r.flags, BTreeSet::from([BoxFlag::SuspectOversized]));
    }

    #[test]
    fn provider_errors_carry_the_sample() {
        let err = center_to_box(PxPoint::new(1.0, 1.0), &sample(10, 10), &mut Failing).unwrap_err();
        assert!(err.to_string().contains("s0"), "{err}");
    }

    #[test]
    fn prompt_outside_image_is_rejected() {
        let err = center_to_box(PxPoint::new(10.0, 1.0), &sample(10, 10), &mut Fixed(vec![])).unwrap_err();
        assert!(matches!(err, BoxError::PromptOutside { .. }));
    }

    #[test]
    fn inconsistent_rle_is_rejected() {
        let mut provider = Fixed(vec![MaskCandidate {
            area_px: 3,
            bbox: PxBox::new(0.0, 0.0, 2.0, 1.0),
            contains_prompt: true,
            rle: Some(vec![0, 2, 2]),
        }]);
        let err = center_to_box(PxPoint::new(0.5, 0.5), &sample(2, 2), &mut provider).unwrap_err();
        assert!(matches!(err, BoxError::InvalidCandidate { index: 0, .. }));
    }

    fn rect_image(w: u32, h: u32, rects: &[(u32, u32, u32, u32)]) -> RgbImage {
        let mut img = RgbImage::new(w, h);
        for &(x, y, rw, rh) in rects {
            for yy in y..y + rh {
                for xx in x..x + rw {
                    img.put_pixel(xx, yy, Rgb([255, 255, 255]));
                }
            }
        }
        img
    }

    struct InMemory(SyntheticProvider, RgbImage);

    impl MaskProvider for InMemory {
        fn candidates(&mut self, request: &MaskRequest<'_>) -> Result<Vec<MaskCandidate>, ProviderError> {
            Ok(self.0.candidates_for(&self.1, request.point))
        }
    }

    #[test]
    fn rectangle_center_gives_tight_box() {
        let img = rect_image(320, 200, &[(100, 60, 40, 20)]);
        let mut provider = InMemory(SyntheticProvider::default(), img);
        let r = center_to_box(PxPoint::new(120.0, 70.0), &sample(320, 200), &mut provider).unwrap();
        assert_eq!(r.bbox, PxBox::new(100.0, 60.0, 140.0, 80.0));
        assert_eq!(r.area_px, 800);
        // A lone component still yields a single candidate.
        assert_eq!(r.flags, BTreeSet::from([BoxFlag::SingleCandidate]));
    }

    #[test]
    fn black_image_has_no_candidates() {
        let mut provider = InMemory(SyntheticProvider::default(), RgbImage::new(64, 64));
        let err = center_to_box(PxPoint::new(3.0, 3.0), &sample(64, 64), &mut provider).unwrap_err();
        assert!(matches!(err, BoxError::NoCandidatesFor { .. }));
    }

    #[test]
    fn prompt_between_blobs_is_flagged() {
        // Two lamps of a signal head with the prompt in the dark gap.
        let img = rect_image(200, 200, &[(90, 40, 20, 20), (90, 80, 20, 30)]);
        let mut provider = InMemory(SyntheticProvider::default(), img);
        let r = center_to_box(PxPoint::new(100.0, 70.0), &sample(200, 200), &mut provider).unwrap();
        assert_eq!(r.chosen_index, 1);
        assert_eq!(r.bbox, PxBox::new(90.0, 80.0, 110.0, 110.0));
        assert!(r.flags.contains(&BoxFlag::PromptOutsideMask));
    }

    #[test]
    fn prompt_in_smaller_of_two_picks_larger() {
        let img = rect_image(300, 100, &[(10, 10, 10, 10), (100, 10, 50, 50)]);
        let mut provider = InMemory(SyntheticProvider::default(), img);
        let r = center_to_box(PxPoint::new(15.0, 15.0), &sample(300, 100), &mut provider).unwrap();
        assert_eq!(r.chosen_index, 1);
        assert_eq!(r.area_px, 2500);
        assert_eq!(r.flags, BTreeSet::from([BoxFlag::PromptOutsideMask]));
    }

    #[test]
    fn deterministic_for_a_deterministic_provider() {
        let img = rect_image(300, 100, &[(10, 10, 10, 10), (100, 10, 50, 50), (200, 20, 5, 70)]);
        let mut provider = InMemory(SyntheticProvider::default(), img);
        let a = center_to_box(PxPoint::new(12.0, 12.0), &sample(300, 100), &mut provider).unwrap();
        let b = center_to_box(PxPoint::new(12.0, 12.0), &sample(300, 100), &mut provider).unwrap();
        assert_eq!(a, b);
    }
}
