//! Key-object tags embedded in question/answer text.
//!
//! A tag names an object by id and camera and locates it either by its
//! center point or by a box:
//!
//! ```text
//! <c1,CAM_BACK,1088.3,497.5>           center, source pixels
//! <c2,CAM_FRONT,10.0,20.0,30.0,40.0>   box, source pixels
//! <c2,CAM_FRONT,372,229,389,278>       box, normalized composite frame
//! ```
//!
//! The two box forms share an arity and are told apart by their numerals:
//! a box whose four components are bare integers in `[0, 1000]` is
//! normalized, anything carrying a decimal point is in pixels.
//!
//! Only text starting with `<c<digits>,` is treated as a tag. Other
//! angle-bracketed text such as `<image>` placeholders passes through.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One of the six surround-view cameras.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CameraName {
    #[serde(rename = "CAM_FRONT_LEFT")]
    FrontLeft,
    #[serde(rename = "CAM_FRONT")]
    Front,
    #[serde(rename = "CAM_FRONT_RIGHT")]
    FrontRight,
    #[serde(rename = "CAM_BACK_LEFT")]
    BackLeft,
    #[serde(rename = "CAM_BACK")]
    Back,
    #[serde(rename = "CAM_BACK_RIGHT")]
    BackRight,
}

impl CameraName {
    /// All cameras in composite row-major order.
    pub const ALL: [CameraName; 6] = [
        CameraName::FrontLeft,
        CameraName::Front,
        CameraName::FrontRight,
        CameraName::BackLeft,
        CameraName::Back,
        CameraName::BackRight,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CameraName::FrontLeft => "CAM_FRONT_LEFT",
            CameraName::Front => "CAM_FRONT",
            CameraName::FrontRight => "CAM_FRONT_RIGHT",
            CameraName::BackLeft => "CAM_BACK_LEFT",
            CameraName::Back => "CAM_BACK",
            CameraName::BackRight => "CAM_BACK_RIGHT",
        }
    }

    /// `(row, col)` of this camera's cell in the 2×3 composite.
    pub fn grid_cell(self) -> (u32, u32) {
        let i = self.index() as u32;
        (i / 3, i % 3)
    }

    /// Inverse of [`CameraName::grid_cell`].
    pub fn from_grid_cell(row: u32, col: u32) -> Option<CameraName> {
        if row < 2 && col < 3 {
            Some(Self::ALL[(row * 3 + col) as usize])
        } else {
            None
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for CameraName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown camera name {0:?}")]
pub struct UnknownCamera(pub String);

impl FromStr for CameraName {
    type Err = UnknownCamera;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| UnknownCamera(s.to_string()))
    }
}

/// Where a tag places its object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TagGeometry {
    /// Center point in source camera pixels.
    Center { x: f64, y: f64 },
    /// Box in source camera pixels.
    BoxPx { x1: f64, y1: f64, x2: f64, y2: f64 },
    /// Box in the normalized composite frame, components in `[0, 1000]`.
    BoxNorm { x1: u16, y1: u16, x2: u16, y2: u16 },
}

impl TagGeometry {
    pub fn form(&self) -> TagForm {
        match self {
            TagGeometry::Center { .. } => TagForm::Center,
            TagGeometry::BoxPx { .. } => TagForm::BoxPx,
            TagGeometry::BoxNorm { .. } => TagForm::BoxNorm,
        }
    }

    /// Center point of the geometry in its own frame.
    pub fn center(&self) -> (f64, f64) {
        match *self {
            TagGeometry::Center { x, y } => (x, y),
            TagGeometry::BoxPx { x1, y1, x2, y2 } => ((x1 + x2) / 2.0, (y1 + y2) / 2.0),
            TagGeometry::BoxNorm { x1, y1, x2, y2 } => (
                (f64::from(x1) + f64::from(x2)) / 2.0,
                (f64::from(y1) + f64::from(y2)) / 2.0,
            ),
        }
    }
}

/// Serialization form of a tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TagForm {
    Center,
    BoxPx,
    BoxNorm,
}

impl fmt::Display for TagForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TagForm::Center => "center",
            TagForm::BoxPx => "box_px",
            TagForm::BoxNorm => "box_norm",
        })
    }
}

/// A parsed `<cN,CAMERA,...>` reference.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyObjectTag {
    pub object_id: String,
    pub camera: CameraName,
    pub geometry: TagGeometry,
    /// Byte range of the tag in its host string. Empty for tags built in code.
    pub span: Range<usize>,
}

impl KeyObjectTag {
    /// Build a tag, checking the id and geometry invariants.
    pub fn new(
        object_id: impl Into<String>,
        camera: CameraName,
        geometry: TagGeometry,
    ) -> Result<Self, TagError> {
        let object_id = object_id.into();
        if !is_object_id(&object_id) {
            return Err(TagError::InvalidObjectId(object_id));
        }
        check_geometry(&geometry)?;
        Ok(Self {
            object_id,
            camera,
            geometry,
            span: 0..0,
        })
    }

    /// Same tag with a different geometry; span is kept.
    pub fn with_geometry(&self, geometry: TagGeometry) -> Result<Self, TagError> {
        check_geometry(&geometry)?;
        Ok(Self {
            geometry,
            ..self.clone()
        })
    }

    /// Equality ignoring the span.
    pub fn same_content(&self, other: &KeyObjectTag) -> bool {
        self.object_id == other.object_id
            && self.camera == other.camera
            && self.geometry == other.geometry
    }
}

impl fmt::Display for KeyObjectTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_tag(f, self)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TagError {
    #[error("malformed tag at bytes {}..{}: {reason}", span.start, span.end)]
    Malformed { span: Range<usize>, reason: String },
    #[error("invalid object id {0:?}; expected 'c' followed by digits")]
    InvalidObjectId(String),
    #[error("invalid tag geometry: {0}")]
    InvalidGeometry(String),
    #[error("cannot serialize a {from} tag in {to} form")]
    ConversionUnavailable { from: TagForm, to: TagForm },
    #[error("no mapping for object id(s): {}", .0.join(", "))]
    UnmappedIds(Vec<String>),
}

/// Text with its tags extracted.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedText {
    raw: String,
    tags: Vec<KeyObjectTag>,
}

impl TaggedText {
    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn tags(&self) -> &[KeyObjectTag] {
        &self.tags
    }

    /// The literal pieces between tags; always `tags().len() + 1` long.
    pub fn segments(&self) -> Vec<&str> {
        let mut out = Vec::with_capacity(self.tags.len() + 1);
        let mut cursor = 0;
        for tag in &self.tags {
            out.push(&self.raw[cursor..tag.span.start]);
            cursor = tag.span.end;
        }
        out.push(&self.raw[cursor..]);
        out
    }

    /// Raw text with the i-th tag replaced by `{i}`.
    pub fn template(&self) -> String {
        self.render(|i, _| Ok::<_, TagError>(format!("{{{i}}}")))
            .expect("infallible")
    }

    /// Rebuild the text, replacing every tag with `replace(index, tag)`.
    pub fn render<E>(
        &self,
        mut replace: impl FnMut(usize, &KeyObjectTag) -> Result<String, E>,
    ) -> Result<String, E> {
        let mut out = String::with_capacity(self.raw.len());
        let mut cursor = 0;
        for (i, tag) in self.tags.iter().enumerate() {
            out.push_str(&self.raw[cursor..tag.span.start]);
            out.push_str(&replace(i, tag)?);
            cursor = tag.span.end;
        }
        out.push_str(&self.raw[cursor..]);
        Ok(out)
    }
}

/// Extract every tag from `text` in left-to-right order.
///
/// Text that does not start like a tag is left alone. Once `<c<digits>,`
/// has been seen the rest of the tag must be well-formed.
pub fn parse_tags(text: &str) -> Result<TaggedText, TagError> {
    let bytes = text.as_bytes();
    let mut tags = Vec::new();
    let mut i = 0;
    while let Some(off) = memchr(b'<', &bytes[i..]) {
        let start = i + off;
        match tag_prefix_len(&bytes[start..]) {
            None => i = start + 1,
            Some(_) => {
                let Some(close) = memchr(b'>', &bytes[start..]) else {
                    return Err(TagError::Malformed {
                        span: start..text.len(),
                        reason: "unterminated tag".into(),
                    });
                };
                let end = start + close + 1;
                let tag = parse_interior(&text[start + 1..end - 1], start..end)?;
                tags.push(tag);
                i = end;
            }
        }
    }
    Ok(TaggedText {
        raw: text.to_string(),
        tags,
    })
}

/// Serialize `tag` in the requested form.
///
/// Only the tag's own form is available; centers cannot become boxes here
/// and the two box frames cannot be converted without a layout.
pub fn serialize_tag(tag: &KeyObjectTag, form: TagForm) -> Result<String, TagError> {
    let from = tag.geometry.form();
    if from != form {
        return Err(TagError::ConversionUnavailable { from, to: form });
    }
    Ok(tag.to_string())
}

/// Replace each tag in `text` by its entry in `mapping`, keyed by object id.
pub fn rewrite_tags(
    text: &TaggedText,
    mapping: &HashMap<String, KeyObjectTag>,
) -> Result<String, TagError> {
    let missing: BTreeSet<&str> = text
        .tags()
        .iter()
        .filter(|t| !mapping.contains_key(&t.object_id))
        .map(|t| t.object_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(TagError::UnmappedIds(
            missing.into_iter().map(str::to_string).collect(),
        ));
    }
    text.render(|_, tag| Ok(mapping[&tag.object_id].to_string()))
}

fn write_tag(f: &mut impl fmt::Write, tag: &KeyObjectTag) -> fmt::Result {
    write!(f, "<{},{},", tag.object_id, tag.camera)?;
    match tag.geometry {
        TagGeometry::Center { x, y } => write!(f, "{x:.1},{y:.1}>"),
        TagGeometry::BoxPx { x1, y1, x2, y2 } => write!(f, "{x1:.1},{y1:.1},{x2:.1},{y2:.1}>"),
        TagGeometry::BoxNorm { x1, y1, x2, y2 } => write!(f, "{x1},{y1},{x2},{y2}>"),
    }
}

fn memchr(needle: u8, hay: &[u8]) -> Option<usize> {
    hay.iter().position(|&b| b == needle)
}

/// Length of `<c<digits>,` at the start of `bytes`, if present.
fn tag_prefix_len(bytes: &[u8]) -> Option<usize> {
    if bytes.len() < 4 || bytes[0] != b'<' || bytes[1] != b'c' {
        return None;
    }
    let digits = bytes[2..].iter().take_while(|b| b.is_ascii_digit()).count();
    if digits == 0 || bytes.get(2 + digits) != Some(&b',') {
        return None;
    }
    Some(3 + digits)
}

fn is_object_id(s: &str) -> bool {
    let b = s.as_bytes();
    b.len() >= 2 && b[0] == b'c' && b[1..].iter().all(u8::is_ascii_digit)
}

fn parse_interior(interior: &str, span: Range<usize>) -> Result<KeyObjectTag, TagError> {
    let malformed = |reason: String| TagError::Malformed {
        span: span.clone(),
        reason,
    };
    if interior.chars().any(char::is_whitespace) {
        return Err(malformed("whitespace inside tag".into()));
    }
    let fields: Vec<&str> = interior.split(',').collect();
    if fields.len() != 4 && fields.len() != 6 {
        return Err(malformed(format!(
            "expected 4 or 6 fields, found {}",
            fields.len()
        )));
    }
    let object_id = fields[0];
    let camera: CameraName = fields[1]
        .parse()
        .map_err(|e: UnknownCamera| malformed(e.to_string()))?;
    let coords = &fields[2..];
    for c in coords {
        if !is_decimal(c) {
            return Err(malformed(format!("non-numeric coordinate {c:?}")));
        }
    }
    let values: Vec<f64> = coords
        .iter()
        .map(|c| c.parse::<f64>().expect("validated decimal"))
        .collect();

    let geometry = if values.len() == 2 {
        TagGeometry::Center {
            x: values[0],
            y: values[1],
        }
    } else if let Some(norm) = as_norm_components(coords) {
        TagGeometry::BoxNorm {
            x1: norm[0],
            y1: norm[1],
            x2: norm[2],
            y2: norm[3],
        }
    } else {
        TagGeometry::BoxPx {
            x1: values[0],
            y1: values[1],
            x2: values[2],
            y2: values[3],
        }
    };
    check_geometry(&geometry).map_err(|e| malformed(e.to_string()))?;
    Ok(KeyObjectTag {
        object_id: object_id.to_string(),
        camera,
        geometry,
        span,
    })
}

/// `-?[0-9]+(\.[0-9]+)?`
fn is_decimal(s: &str) -> bool {
    let s = s.strip_prefix('-').unwrap_or(s);
    let (int, frac) = match s.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (s, None),
    };
    let digits = |p: &str| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit());
    digits(int) && frac.map_or(true, digits)
}

fn as_norm_components(coords: &[&str]) -> Option<[u16; 4]> {
    let mut out = [0u16; 4];
    for (slot, c) in out.iter_mut().zip(coords) {
        if c.starts_with('-') || c.contains('.') || c.len() > 4 {
            return None;
        }
        let v: u16 = c.parse().ok()?;
        if v > 1000 {
            return None;
        }
        *slot = v;
    }
    Some(out)
}

fn check_geometry(g: &TagGeometry) -> Result<(), TagError> {
    match *g {
        TagGeometry::Center { x, y } => {
            if !(x.is_finite() && y.is_finite()) {
                return Err(TagError::InvalidGeometry("non-finite center".into()));
            }
        }
        TagGeometry::BoxPx { x1, y1, x2, y2 } => {
            if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
                return Err(TagError::InvalidGeometry("non-finite box".into()));
            }
            if x1 > x2 || y1 > y2 {
                return Err(TagError::InvalidGeometry("box corners out of order".into()));
            }
        }
        TagGeometry::BoxNorm { x1, y1, x2, y2 } => {
            if [x1, y1, x2, y2].iter().any(|&v| v > 1000) {
                return Err(TagError::InvalidGeometry(
                    "normalized component above 1000".into(),
                ));
            }
            if x1 > x2 || y1 > y2 {
                return Err(TagError::InvalidGeometry("box corners out of order".into()));
            }
        }
    }
    Ok(())
}
