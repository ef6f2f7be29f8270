//! Multi-camera driving QA to single-image conversation records.
//!
//! Six camera views are stitched into one labeled 2688×896 composite
//! ([`compositor`]), object references in the text are parsed ([`ctag`]),
//! turned into boxes ([`boxer`]) and mapped into a normalized `0..=1000`
//! frame ([`geometry`]). [`pipeline`] runs this over a whole dataset and
//! [`metrics`] scores model answers.
//!
//! ```
//! use driveforge::ctag::CameraName;
//! use driveforge::geometry::{CompositeLayout, PxPoint, SourceDims};
//!
//! let layout = CompositeLayout::STANDARD;
//! let dims = SourceDims::new(CameraName::Back, 1600, 900).unwrap();
//! let p = layout.to_composite(PxPoint::new(1088.3, 497.5), &dims).unwrap();
//! assert_eq!(layout.normalize_point(p).unwrap(), (560, 776));
//! ```
//!
//! The guide in `book/` walks through each stage.

pub mod boxer;
pub mod compositor;
pub mod ctag;
pub mod fixtures;
pub mod geometry;
pub mod metrics;
pub mod pipeline;

// The guide's snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/composite.md")]
    mod composite {}
    #[doc = include_str!("../../../book/src/coordinates.md")]
    mod coordinates {}
    #[doc = include_str!("../../../book/src/tags.md")]
    mod tags {}
    #[doc = include_str!("../../../book/src/boxes.md")]
    mod boxes {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
