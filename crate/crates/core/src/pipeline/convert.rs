//! Per-frame conversion of QA pairs into conversation records.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxer::{center_to_box, BoxFlag, MaskProvider, SampleRef};
use crate::compositor::{compose, CompositeImage, ViewImage};
use crate::ctag::{parse_tags, CameraName, KeyObjectTag, TagGeometry};
use crate::geometry::{CompositeLayout, NormBox, PxBox, PxPoint, Source, SourceDims};

use super::ingest::{Frame, QARecord, QaItem};

/// System message placed in front of every conversation.
pub const SYSTEM_PROMPT: &str = "You are an Autonomous Driving AI assistant. You receive an image that consists of six surrounding camera views. The layout is as follows:
The first row contains three images: FRONT_LEFT, FRONT, FRONT_RIGHT.
The second row contains three images: BACK_LEFT, BACK, BACK_RIGHT.
Your task is to analyze these images and provide insights or actions based on the visual data.";

pub const IMAGE_PLACEHOLDER: &str = "<image>";

/// Directory, relative to the output root, that holds composites.
pub const IMAGE_DIR: &str = "images";

/// How rewritten tags are rendered in the output texts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagStyle {
    /// `<c1,CAM_BACK,540,700,580,850>`
    #[default]
    Inline,
    /// `<ref>c1,CAM_BACK</ref><box>[[540, 700, 580, 850]]</box>`
    RefBox,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvertOptions {
    pub system_prompt: String,
    pub tag_style: TagStyle,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        Self {
            system_prompt: SYSTEM_PROMPT.to_string(),
            tag_style: TagStyle::Inline,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Compose,
    Parse,
    Box,
    Temporal,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Ingest => "ingest",
            Stage::Compose => "compose",
            Stage::Parse => "parse",
            Stage::Box => "box",
            Stage::Temporal => "temporal",
            Stage::Write => "write",
        })
    }
}

/// Why a record was not produced.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{stage}: {message}")]
pub struct RecordError {
    pub stage: Stage,
    pub message: String,
}

impl RecordError {
    pub fn new(stage: Stage, message: impl fmt::Display) -> Self {
        Self {
            stage,
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub scene_id: String,
    pub frame_id: String,
    pub qa_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qa_category: Option<String>,
}

/// One training conversation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationRecord {
    pub sample_id: String,
    pub composite_image: String,
    pub system_prompt: String,
    pub user_text: String,
    pub assistant_text: String,
    pub temporal: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prev_composite_image: Option<String>,
    /// Flags per object, keyed `object_id,CAMERA`.
    pub box_flags: BTreeMap<String, BTreeSet<BoxFlag>>,
    pub provenance: Provenance,
}

/// Output path of a frame's composite, relative to the output root.
pub fn composite_path(frame_id: &str) -> String {
    format!("{IMAGE_DIR}/{frame_id}.png")
}

/// Frame ids become file names, so they must be plain names.
pub fn check_frame_id(frame_id: &str) -> Result<(), RecordError> {
    let bad = frame_id.is_empty()
        || frame_id == "."
        || frame_id == ".."
        || frame_id.chars().any(|c| matches!(c, '/' | '\\' | '\0'));
    if bad {
        return Err(RecordError::new(Stage::Ingest, format!("frame id {frame_id:?} is not a valid file name")));
    }
    Ok(())
}

fn tag_key(tag: &KeyObjectTag) -> String {
    format!("{},{}", tag.object_id, tag.camera)
}

/// Cache key: one box per object, camera and geometry within a frame.
type ObjectKey = (String, CameraName, [u64; 4]);

fn object_key(tag: &KeyObjectTag) -> ObjectKey {
    let g = match tag.geometry {
        TagGeometry::Center { x, y } => [0, 0, x.to_bits(), y.to_bits()],
        TagGeometry::BoxPx { x1, y1, x2, y2 } => [x1.to_bits(), y1.to_bits(), x2.to_bits(), y2.to_bits()],
        TagGeometry::BoxNorm { x1, y1, x2, y2 } => [1, u64::from(x1) << 16 | u64::from(y1), u64::from(x2), u64::from(y2)],
    };
    (tag.object_id.clone(), tag.camera, g)
}

#[derive(Debug, Clone)]
struct Resolved {
    norm: NormBox,
    flags: BTreeSet<BoxFlag>,
}

/// Loaded views of one frame plus the boxes resolved so far.
pub struct FrameSession {
    scene_id: String,
    frame_id: String,
    views: Vec<ViewImage>,
    paths: BTreeMap<CameraName, std::path::PathBuf>,
    layout: CompositeLayout,
    cache: HashMap<ObjectKey, Result<Resolved, RecordError>>,
}

impl FrameSession {
    /// Check and decode the six views of `frame`.
    pub fn open(frame: &Frame, layout: &CompositeLayout) -> Result<Self, RecordError> {
        check_frame_id(&frame.frame_id)?;
        frame.check_images().map_err(|m| RecordError::new(Stage::Ingest, m))?;
        let views = CameraName::ALL
            .iter()
            .map(|&c| ViewImage::open(c, &frame.image_paths[&c]).map_err(|e| RecordError::new(Stage::Compose, e)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            scene_id: frame.scene_id.clone(),
            frame_id: frame.frame_id.clone(),
            views,
            paths: frame.image_paths.clone(),
            layout: *layout,
            cache: HashMap::new(),
        })
    }

    pub fn frame_id(&self) -> &str {
        &self.frame_id
    }

    pub fn dims(&self, camera: CameraName) -> SourceDims {
        self.views[camera.index()].dims()
    }

    pub fn composite(&self) -> Result<CompositeImage, RecordError> {
        compose(&self.views, &self.layout).map_err(|e| RecordError::new(Stage::Compose, e))
    }

    fn resolve(&mut self, tag: &KeyObjectTag, sample_id: &str, provider: &mut dyn MaskProvider) -> Result<Resolved, RecordError> {
        let key = object_key(tag);
        if let Some(hit) = self.cache.get(&key) {
            return hit.clone();
        }
        let dims = self.dims(tag.camera);
        let layout = self.layout;
        let to_norm = |b: PxBox<Source>| {
            layout
                .box_to_composite(b, &dims)
                .and_then(|c| layout.normalize(c))
                .map_err(|e| RecordError::new(Stage::Box, format!("{}: {e}", tag_key(tag))))
        };
        let result = match tag.geometry {
            TagGeometry::Center { x, y } => {
                let sample = SampleRef {
                    id: sample_id.to_string(),
                    image: self.paths[&tag.camera].clone(),
                    dims,
                };
                center_to_box(PxPoint::new(x, y), &sample, provider)
                    .map_err(|e| RecordError::new(Stage::Box, format!("{}: {e}", tag_key(tag))))
                    .and_then(|r| {
                        let flags = r.flags;
                        to_norm(r.bbox).map(|norm| Resolved { norm, flags })
                    })
            }
            TagGeometry::BoxPx { x1, y1, x2, y2 } => to_norm(PxBox::new(x1, y1, x2, y2)).map(|norm| Resolved {
                norm,
                flags: BTreeSet::new(),
            }),
            TagGeometry::BoxNorm { x1, y1, x2, y2 } => NormBox::new(x1, y1, x2, y2)
                .map(|norm| Resolved {
                    norm,
                    flags: BTreeSet::new(),
                })
                .map_err(|e| RecordError::new(Stage::Box, e)),
        };
        self.cache.insert(key, result.clone());
        result
    }

    fn rewrite(
        &mut self,
        text: &str,
        sample_id: &str,
        provider: &mut dyn MaskProvider,
        style: TagStyle,
        flags: &mut BTreeMap<String, BTreeSet<BoxFlag>>,
    ) -> Result<String, RecordError> {
        let parsed = parse_tags(text).map_err(|e| RecordError::new(Stage::Parse, e))?;
        parsed.render(|_, tag| {
            let resolved = self.resolve(tag, sample_id, provider)?;
            flags.entry(tag_key(tag)).or_default().extend(resolved.flags.iter().copied());
            let n = resolved.norm;
            Ok(match style {
                TagStyle::Inline => tag
                    .with_geometry(TagGeometry::BoxNorm {
                        x1: n.x1,
                        y1: n.y1,
                        x2: n.x2,
                        y2: n.y2,
                    })
                    .map_err(|e| RecordError::new(Stage::Box, e))?
                    .to_string(),
                TagStyle::RefBox => format!(
                    "<ref>{},{}</ref><box>[[{}, {}, {}, {}]]</box>",
                    tag.object_id, tag.camera, n.x1, n.y1, n.x2, n.y2
                ),
            })
        })
    }

    /// Convert question `index` of this frame.
    ///
    /// With `prev_frame_id` set the record uses the two-image prompt. Tags
    /// always refer to the current frame.
    pub fn convert_qa(
        &mut self,
        qa: &QaItem,
        index: usize,
        prev_frame_id: Option<&str>,
        provider: &mut dyn MaskProvider,
        options: &ConvertOptions,
    ) -> Result<ConversationRecord, RecordError> {
        let sample_id = format!("{}_q{index}", self.frame_id);
        let mut box_flags = BTreeMap::new();
        let question = self.rewrite(&qa.question, &sample_id, provider, options.tag_style, &mut box_flags)?;
        let answer = self.rewrite(&qa.answer, &sample_id, provider, options.tag_style, &mut box_flags)?;
        let user_text = match prev_frame_id {
            None => format!("{IMAGE_PLACEHOLDER}\n{question}"),
            Some(_) => format!("previous images: <image1>, current images: <image2> {question}"),
        };
        Ok(ConversationRecord {
            composite_image: composite_path(&self.frame_id),
            sample_id,
            system_prompt: options.system_prompt.clone(),
            user_text,
            assistant_text: answer,
            temporal: prev_frame_id.is_some(),
            prev_composite_image: prev_frame_id.map(composite_path),
            box_flags,
            provenance: Provenance {
                scene_id: self.scene_id.clone(),
                frame_id: self.frame_id.clone(),
                qa_index: index,
                qa_category: qa.category.clone(),
            },
        })
    }
}

fn single_frame(rec: &QARecord) -> Frame {
    Frame {
        scene_id: rec.scene_id.clone(),
        frame_id: rec.frame_id.clone(),
        prev_frame_id: rec.prev_frame_id.clone(),
        image_paths: rec.image_paths.clone(),
        qa: vec![QaItem {
            question: rec.question.clone(),
            answer: rec.answer.clone(),
            category: rec.qa_category.clone(),
        }],
    }
}

/// Convert a lone record; its sample id uses question index 0.
pub fn convert(
    rec: &QARecord,
    provider: &mut dyn MaskProvider,
    layout: &CompositeLayout,
    options: &ConvertOptions,
) -> Result<(ConversationRecord, CompositeImage), RecordError> {
    let frame = single_frame(rec);
    let mut session = FrameSession::open(&frame, layout)?;
    let record = session.convert_qa(&frame.qa[0], 0, None, provider, options)?;
    Ok((record, session.composite()?))
}

/// Convert a record together with its previous key frame.
///
/// Returns the record, the current composite and the previous composite.
pub fn convert_temporal(
    rec: &QARecord,
    prev: &QARecord,
    provider: &mut dyn MaskProvider,
    layout: &CompositeLayout,
    options: &ConvertOptions,
) -> Result<(ConversationRecord, CompositeImage, CompositeImage), RecordError> {
    match rec.prev_frame_id.as_deref() {
        None => return Err(RecordError::new(Stage::Temporal, "record has no previous frame")),
        Some(p) if p != prev.frame_id => {
            return Err(RecordError::new(
                Stage::Temporal,
                format!("previous frame is {p:?}, got {:?}", prev.frame_id),
            ))
        }
        Some(_) => {}
    }
    let prev_session = FrameSession::open(&single_frame(prev), layout)
        .map_err(|e| RecordError::new(Stage::Temporal, format!("previous frame: {e}")))?;
    let prev_composite = prev_session.composite()?;
    let frame = single_frame(rec);
    let mut session = FrameSession::open(&frame, layout)?;
    let record = session.convert_qa(&frame.qa[0], 0, Some(&prev.frame_id), provider, options)?;
    Ok((record, session.composite()?, prev_composite))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxer::SyntheticProvider;
    use image::{Rgb, RgbImage};
    use std::path::Path;

    /// Six 1600x900 views; CAM_BACK has a white 40x20 block around (1088, 497).
    fn write_views(dir: &Path, tag: &str) -> BTreeMap<CameraName, std::path::PathBuf> {
        CameraName::ALL
            .iter()
            .map(|&c| {
                let mut img = RgbImage::new(1600, 900);
                if c == CameraName::Back {
                    for y in 488..508 {
                        for x in 1068..1108 {
                            img.put_pixel(x, y, Rgb([255, 255, 255]));
                        }
                    }
                }
                let p = dir.join(format!("{tag}_{c}.png"));
                img.save(&p).unwrap();
                (c, p)
            })
            .collect()
    }

    fn record(dir: &Path, frame_id: &str, question: &str, answer: &str) -> QARecord {
        QARecord {
            scene_id: "scene".into(),
            frame_id: frame_id.into(),
            question: question.into(),
            answer: answer.into(),
            qa_category: None,
            image_paths: write_views(dir, frame_id),
            prev_frame_id: None,
        }
    }

    #[test]
    fn untagged_text_passes_through() {
        let dir = tempfile::tempdir().unwrap();
        let rec = record(dir.path(), "f0", "Is it raining?", "No.");
        let (out, composite) =
            convert(&rec, &mut SyntheticProvider::default(), &CompositeLayout::STANDARD, &ConvertOptions::default()).unwrap();
        assert_eq!(out.user_text, "<image>\nIs it raining?");
        assert_eq!(out.assistant_text, "No.");
        assert_eq!(out.system_prompt, SYSTEM_PROMPT);
        assert_eq!(out.composite_image, "images/f0.png");
        assert!(out.box_flags.is_empty());
        assert_eq!(composite.pixels.dimensions(), (2688, 896));
    }

    #[test]
    fn example_center_becomes_a_normalized_box() {
        let dir = tempfile::tempdir().unwrap();
        let rec = record(
            dir.path(),
            "f0",
            "What is <c1,CAM_BACK,1088.3,497.5> doing?",
            "<c1,CAM_BACK,1088.3,497.5> is parked.",
        );
        let (out, _) =
            convert(&rec, &mut SyntheticProvider::default(), &CompositeLayout::STANDARD, &ConvertOptions::default()).unwrap();
        // Block (1068,488)-(1108,508) in the back view:
        // x: 1068 * 0.56 + 896 = 1494.08 -> 555.8, 1108 * 0.56 + 896 = 1516.48 -> 564.2
        // y: 488 * 448/900 + 448 = 690.92 -> 771.1, 508 * 448/900 + 448 = 700.87 -> 782.2
        let parsed = parse_tags(&out.assistant_text).unwrap();
        match parsed.tags()[0].geometry {
            TagGeometry::BoxNorm { x1, y1, x2, y2 } => {
                for (got, want) in [(x1, 555.8), (y1, 771.1), (x2, 564.2), (y2, 782.2)] {
                    assert!((f64::from(got) - want).abs() <= 1.0, "{got} vs {want}");
                }
            }
            ref g => panic!("{g:?}"),
        }
        assert_eq!(out.user_text, format!("<image>\nWhat is {} doing?", parsed.tags()[0]));
        assert_eq!(out.box_flags["c1,CAM_BACK"], BTreeSet::from([BoxFlag::SingleCandidate]));
    }

    #[test]
    fn ref_box_style() {
        let dir = tempfile::tempdir().unwrap();
        let rec = record(dir.path(), "f0", "q", "See <c1,CAM_BACK,1088.3,497.5>.");
        let options = ConvertOptions {
            tag_style: TagStyle::RefBox,
            ..Default::default()
        };
        let (out, _) = convert(&rec, &mut SyntheticProvider::default(), &CompositeLayout::STANDARD, &options).unwrap();
        assert!(out.assistant_text.starts_with("See <ref>c1,CAM_BACK</ref><box>[["), "{}", out.assistant_text);
        assert!(out.assistant_text.ends_with("]]</box>."));
    }

    #[test]
    fn conversion_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let rec = record(dir.path(), "f0", "<c1,CAM_BACK,1088.3,497.5>?", "ok");
        let run = || {
            let (r, c) = convert(&rec, &mut SyntheticProvider::default(), &CompositeLayout::STANDARD, &ConvertOptions::default())
                .unwrap();
            (serde_json::to_string(&r).unwrap(), c.pixels.into_raw())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn boxing_failures_name_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let rec = record(dir.path(), "f0", "<c1,CAM_FRONT,10,10>?", "ok");
        let err = convert(&rec, &mut SyntheticProvider::default(), &CompositeLayout::STANDARD, &ConvertOptions::default())
            .unwrap_err();
        assert_eq!(err.stage, Stage::Box);
        let rec = record(dir.path(), "f1", "<c1,CAM_FRONT,10>?", "ok");
        let err = convert(&rec, &mut SyntheticProvider::default(), &CompositeLayout::STANDARD, &ConvertOptions::default())
            .unwrap_err();
        assert_eq!(err.stage, Stage::Parse);
    }

    #[test]
    fn temporal_prompt_has_both_placeholders() {
        let dir = tempfile::tempdir().unwrap();
        let prev = record(dir.path(), "f0", "q", "a");
        let mut rec = record(dir.path(), "f1", "Where is <c1,CAM_BACK,1088.3,497.5>?", "Behind.");
        let layout = CompositeLayout::STANDARD;
        let opts = ConvertOptions::default();
        assert_eq!(
            convert_temporal(&rec, &prev, &mut SyntheticProvider::default(), &layout, &opts).unwrap_err().stage,
            Stage::Temporal
        );
        rec.prev_frame_id = Some("f0".into());
        let (out, _, prev_c) = convert_temporal(&rec, &prev, &mut SyntheticProvider::default(), &layout, &opts).unwrap();
        let first = out.user_text.find("<image1>").unwrap();
        let second = out.user_text.find("<image2>").unwrap();
        assert!(first < second);
        assert!(out.user_text.starts_with("previous images: <image1>, current images: <image2> Where is <c1,CAM_BACK,"));
        assert_eq!(out.prev_composite_image.as_deref(), Some("images/f0.png"));
        assert!(out.temporal);
        assert_eq!(prev_c.pixels.dimensions(), (2688, 896));
    }

    #[test]
    fn frame_ids_must_be_file_names() {
        assert!(check_frame_id("abc_123").is_ok());
        for bad in ["", ".", "..", "a/b", "a\\b"] {
            assert!(check_frame_id(bad).is_err(), "{bad:?}");
        }
    }
}
