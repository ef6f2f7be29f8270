//! Coordinate algebra for the 2×3 multi-view composite.
//!
//! Every camera view is resized to `896×448` and placed in a fixed grid
//! cell, giving a `2688×896` composite:
//!
//! ```text
//!   +----------------+----------------+----------------+
//!   | CAM_FRONT_LEFT |   CAM_FRONT    | CAM_FRONT_RIGHT|   row 0
//!   +----------------+----------------+----------------+
//!   | CAM_BACK_LEFT  |    CAM_BACK    | CAM_BACK_RIGHT |   row 1
//!   +----------------+----------------+----------------+
//! ```
//!
//! Pixel coordinates are continuous with the origin at the top-left corner
//! of the top-left pixel. Box coordinates in the composite are normalized
//! per axis to integers in `[0, 1000]`.

use std::fmt;
use std::marker::PhantomData;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctag::CameraName;

/// Integer range of normalized coordinates.
pub const NORM_SCALE: u16 = 1000;

/// Marker for source camera pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Source;

/// Marker for composite pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Composite;

/// A point in pixel coordinates of frame `F`.
pub struct PxPoint<F> {
    pub x: f64,
    pub y: f64,
    _frame: PhantomData<F>,
}

impl<F> PxPoint<F> {
    pub fn new(x: f64, y: f64) -> Self {
        Self {
            x,
            y,
            _frame: PhantomData,
        }
    }
}

/// An axis-aligned box in pixel coordinates of frame `F`, corners ordered.
pub struct PxBox<F> {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    _frame: PhantomData<F>,
}

impl<F> PxBox<F> {
    /// Builds a box, swapping corners into order if needed.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            x1: x1.min(x2),
            y1: y1.min(y2),
            x2: x1.max(x2),
            y2: y1.max(y2),
            _frame: PhantomData,
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> PxPoint<F> {
        PxPoint::new((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn top_left(&self) -> PxPoint<F> {
        PxPoint::new(self.x1, self.y1)
    }

    pub fn bottom_right(&self) -> PxPoint<F> {
        PxPoint::new(self.x2, self.y2)
    }
}

// Manual impls so the markers need no bounds.
macro_rules! frame_impls {
    ($ty:ident { $($f:ident),+ }) => {
        impl<F> Clone for $ty<F> {
            fn clone(&self) -> Self {
                *self
            }
        }
        impl<F> Copy for $ty<F> {}
        impl<F> PartialEq for $ty<F> {
            fn eq(&self, other: &Self) -> bool {
                true $(&& self.$f == other.$f)+
            }
        }
        impl<F> fmt::Debug for $ty<F> {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let name = std::any::type_name::<F>().rsplit("::").next().unwrap_or("");
                let mut d = f.debug_struct(concat!(stringify!($ty)));
                $(d.field(stringify!($f), &self.$f);)+
                d.field("frame", &name).finish()
            }
        }
    };
}
frame_impls!(PxPoint { x, y });
frame_impls!(PxBox { x1, y1, x2, y2 });

/// A box in the normalized composite frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NormBox {
    pub x1: u16,
    pub y1: u16,
    pub x2: u16,
    pub y2: u16,
}

impl NormBox {
    pub fn new(x1: u16, y1: u16, x2: u16, y2: u16) -> Result<Self, GeometryError> {
        if [x1, y1, x2, y2].iter().any(|&v| v > NORM_SCALE) || x1 > x2 || y1 > y2 {
            return Err(GeometryError::InvalidNormBox([x1, y1, x2, y2]));
        }
        Ok(Self { x1, y1, x2, y2 })
    }
}

/// Pixel dimensions of one source camera image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDims {
    pub camera: CameraName,
    pub width: u32,
    pub height: u32,
}

impl SourceDims {
    pub fn new(camera: CameraName, width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptySource { camera });
        }
        Ok(Self {
            camera,
            width,
            height,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("point ({x}, {y}) lies outside the {width}x{height} {camera} image")]
    OutOfSource {
        camera: CameraName,
        x: f64,
        y: f64,
        width: u32,
        height: u32,
    },
    #[error("point ({x}, {y}) lies outside the composite")]
    OutOfComposite { x: f64, y: f64 },
    #[error("{camera} image has a zero dimension")]
    EmptySource { camera: CameraName },
    #[error("invalid normalized box {0:?}")]
    InvalidNormBox([u16; 4]),
    #[error("no source dimensions for {0}")]
    MissingDims(CameraName),
}

/// The fixed grid geometry of the composite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositeLayout {
    view_w: u32,
    view_h: u32,
    cols: u32,
    rows: u32,
}

impl Default for CompositeLayout {
    fn default() -> Self {
        Self::STANDARD
    }
}

impl CompositeLayout {
    /// `896×448` views in a 3-wide, 2-high grid.
    pub const STANDARD: CompositeLayout = CompositeLayout {
        view_w: 896,
        view_h: 448,
        cols: 3,
        rows: 2,
    };

    pub fn view_w(&self) -> u32 {
        self.view_w
    }

    pub fn view_h(&self) -> u32 {
        self.view_h
    }

    pub fn cols(&self) -> u32 {
        self.cols
    }

    pub fn rows(&self) -> u32 {
        self.rows
    }

    pub fn composite_w(&self) -> u32 {
        self.cols * self.view_w
    }

    pub fn composite_h(&self) -> u32 {
        self.rows * self.view_h
    }

    /// Denominators used for normalization, `(composite_w, composite_h)`.
    pub fn norm_denoms(&self) -> (f64, f64) {
        (f64::from(self.composite_w()), f64::from(self.composite_h()))
    }

    /// Composite pixel size of one normalized unit per axis.
    pub fn quantization_step(&self) -> (f64, f64) {
        let (w, h) = self.norm_denoms();
        (w / f64::from(NORM_SCALE), h / f64::from(NORM_SCALE))
    }

    /// Top-left corner of a camera's cell in composite pixels.
    pub fn cell_origin(&self, camera: CameraName) -> (u32, u32) {
        let (row, col) = camera.grid_cell();
        (col * self.view_w, row * self.view_h)
    }

    /// The camera whose half-open cell contains `p`.
    ///
    /// The right and bottom composite edges fold into the last column and row.
    pub fn camera_at(&self, p: PxPoint<Composite>) -> Result<CameraName, GeometryError> {
        let (w, h) = self.norm_denoms();
        if !(0.0..=w).contains(&p.x) || !(0.0..=h).contains(&p.y) {
            return Err(GeometryError::OutOfComposite { x: p.x, y: p.y });
        }
        let col = ((p.x / f64::from(self.view_w)).floor() as u32).min(self.cols - 1);
        let row = ((p.y / f64::from(self.view_h)).floor() as u32).min(self.rows - 1);
        Ok(CameraName::from_grid_cell(row, col).expect("cell within grid"))
    }

    /// Map a source pixel point into the composite.
    pub fn to_composite(
        &self,
        p: PxPoint<Source>,
        dims: &SourceDims,
    ) -> Result<PxPoint<Composite>, GeometryError> {
        let (w, h) = (f64::from(dims.width), f64::from(dims.height));
        if !(0.0..=w).contains(&p.x) || !(0.0..=h).contains(&p.y) {
            return Err(GeometryError::OutOfSource {
                camera: dims.camera,
                x: p.x,
                y: p.y,
                width: dims.width,
                height: dims.height,
            });
        }
        let (ox, oy) = self.cell_origin(dims.camera);
        Ok(PxPoint::new(
            p.x * f64::from(self.view_w) / w + f64::from(ox),
            p.y * f64::from(self.view_h) / h + f64::from(oy),
        ))
    }

    /// Map a source pixel box into the composite, corner by corner.
    pub fn box_to_composite(
        &self,
        b: PxBox<Source>,
        dims: &SourceDims,
    ) -> Result<PxBox<Composite>, GeometryError> {
        let tl = self.to_composite(b.top_left(), dims)?;
        let br = self.to_composite(b.bottom_right(), dims)?;
        Ok(PxBox::new(tl.x, tl.y, br.x, br.y))
    }

    /// Invert [`CompositeLayout::to_composite`] for a known camera.
    ///
    /// No cell check is made, so points that quantization pushed just past
    /// the cell edge still map back to their own camera.
    pub fn to_source(&self, camera: CameraName, p: PxPoint<Composite>, dims: &SourceDims) -> PxPoint<Source> {
        let (ox, oy) = self.cell_origin(camera);
        PxPoint::new(
            (p.x - f64::from(ox)) * f64::from(dims.width) / f64::from(self.view_w),
            (p.y - f64::from(oy)) * f64::from(dims.height) / f64::from(self.view_h),
        )
    }

    /// Find the cell containing `p` and map it back to that camera's image.
    pub fn from_composite(
        &self,
        p: PxPoint<Composite>,
        dims_by_camera: impl Fn(CameraName) -> Option<SourceDims>,
    ) -> Result<(CameraName, PxPoint<Source>), GeometryError> {
        let camera = self.camera_at(p)?;
        let dims = dims_by_camera(camera).ok_or(GeometryError::MissingDims(camera))?;
        Ok((camera, self.to_source(camera, p, &dims)))
    }

    /// Normalize one composite point to `[0, 1000]` integers.
    pub fn normalize_point(&self, p: PxPoint<Composite>) -> Result<(u16, u16), GeometryError> {
        let (w, h) = self.norm_denoms();
        if !(0.0..=w).contains(&p.x) || !(0.0..=h).contains(&p.y) {
            return Err(GeometryError::OutOfComposite { x: p.x, y: p.y });
        }
        Ok((quantize(p.x / w), quantize(p.y / h)))
    }

    /// Normalize a composite box; rounding is half away from zero.
    pub fn normalize(&self, b: PxBox<Composite>) -> Result<NormBox, GeometryError> {
        let (x1, y1) = self.normalize_point(b.top_left())?;
        let (x2, y2) = self.normalize_point(b.bottom_right())?;
        NormBox::new(x1, y1, x2, y2)
    }

    /// Scale a normalized box back to composite pixels. No rounding.
    pub fn denormalize(&self, b: NormBox) -> PxBox<Composite> {
        let (sx, sy) = self.quantization_step();
        PxBox::new(
            f64::from(b.x1) * sx,
            f64::from(b.y1) * sy,
            f64::from(b.x2) * sx,
            f64::from(b.y2) * sy,
        )
    }

    /// Scale one normalized point back to composite pixels.
    pub fn denormalize_point(&self, x: f64, y: f64) -> PxPoint<Composite> {
        let (sx, sy) = self.quantization_step();
        PxPoint::new(x * sx, y * sy)
    }
}

fn quantize(fraction: f64) -> u16 {
    // f64::round is half away from zero.
    (fraction * f64::from(NORM_SCALE)).round().clamp(0.0, f64::from(NORM_SCALE)) as u16
}
