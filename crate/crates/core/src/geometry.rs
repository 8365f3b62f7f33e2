//! Box and coordinate arithmetic shared by the replay path, the detection
//! loss and the data tooling.
//!
//! Three box spaces are in play:
//!
//! * [`PixelBox`]: corner form in pixels of the resized image frame.
//! * [`CellRange`]: half-open row/column ranges over the unified feature map.
//! * [`CenterBox`]: normalized `(x_c, y_c, w, h)` used by the regression loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("malformed box: coordinate {index} is not finite")]
    MalformedBox { index: usize },
    #[error("box ({x1}, {y1}, {x2}, {y2}) lies outside the {width}x{height} frame")]
    OutOfFrame {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        width: u32,
        height: u32,
    },
}

/// Corner-form box in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl PixelBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// Builds a box from four raw numbers, rejecting non-finite values and
    /// reordering swapped corners. No frame clamping happens here.
    pub fn from_raw(raw: [f64; 4]) -> Result<Self, GeometryError> {
        if let Some(index) = raw.iter().position(|v| !v.is_finite()) {
            return Err(GeometryError::MalformedBox { index });
        }
        let [a, b, c, d] = raw;
        Ok(Self {
            x1: a.min(c),
            y1: b.min(d),
            x2: a.max(c),
            y2: b.max(d),
        })
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    /// Non-uniform scaling, used to move boxes between the original image
    /// and the resized frame.
    pub fn scale(self, sx: f64, sy: f64) -> Self {
        Self {
            x1: self.x1 * sx,
            y1: self.y1 * sy,
            x2: self.x2 * sx,
            y2: self.y2 * sy,
        }
    }
}

/// Half-open cell index ranges over the feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellRange {
    pub row_start: usize,
    pub row_end: usize,
    pub col_start: usize,
    pub col_end: usize,
}

impl CellRange {
    pub fn rows(&self) -> usize {
        self.row_end - self.row_start
    }

    pub fn cols(&self) -> usize {
        self.col_end - self.col_start
    }

    pub fn cell_count(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn contains(&self, other: &CellRange) -> bool {
        self.row_start <= other.row_start
            && self.row_end >= other.row_end
            && self.col_start <= other.col_start
            && self.col_end >= other.col_end
    }
}

/// Normalized center-form box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterBox {
    pub xc: f64,
    pub yc: f64,
    pub w: f64,
    pub h: f64,
}

impl CenterBox {
    pub const fn new(xc: f64, yc: f64, w: f64, h: f64) -> Self {
        Self { xc, yc, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            xc: (x1 + x2) / 2.0,
            yc: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// Corner form `[x1, y1, x2, y2]` in the same (normalized) units.
    pub fn to_corners(self) -> [f64; 4] {
        [
            self.xc - self.w / 2.0,
            self.yc - self.h / 2.0,
            self.xc + self.w / 2.0,
            self.yc + self.h / 2.0,
        ]
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.xc, self.yc, self.w, self.h]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_normalized(&self) -> bool {
        self.to_array().iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// Resized image frame together with the crop size `p` and the vision
/// patch stride `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageFrame {
    pub width: u32,
    pub height: u32,
    pub patch_size: u32,
    pub patch_stride: u32,
}

impl ImageFrame {
    /// Checked constructor; enforces `W mod p = 0`, `H mod p = 0` and
    /// `p mod s = 0`.
    pub fn new(
        width: u32,
        height: u32,
        patch_size: u32,
        patch_stride: u32,
    ) -> Result<Self, GeometryError> {
        let frame = Self {
            width,
            height,
            patch_size,
            patch_stride,
        };
        frame.validate()?;
        Ok(frame)
    }

    /// A plain `width x height` pixel canvas with unit patches. Used where
    /// only the bounds matter (cropping original images).
    pub fn bounds(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            patch_size: 1,
            patch_stride: 1,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.patch_stride == 0 {
            return Err(GeometryError::InvalidFrame("patch stride is zero".into()));
        }
        if self.patch_size == 0 {
            return Err(GeometryError::InvalidFrame("patch size is zero".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidFrame(format!(
                "zero-size frame {}x{}",
                self.width, self.height
            )));
        }
        if !self.patch_size.is_multiple_of(self.patch_stride) {
            return Err(GeometryError::InvalidFrame(format!(
                "patch size {} not divisible by stride {}",
                self.patch_size, self.patch_stride
            )));
        }
        if !self.width.is_multiple_of(self.patch_size) || !self.height.is_multiple_of(self.patch_size) {
            return Err(GeometryError::InvalidFrame(format!(
                "frame {}x{} not divisible by patch size {}",
                self.width, self.height, self.patch_size
            )));
        }
        Ok(())
    }

    /// Feature map rows, `H / s`.
    pub fn cell_rows(&self) -> usize {
        (self.height / self.patch_stride) as usize
    }

    /// Feature map columns, `W / s`.
    pub fn cell_cols(&self) -> usize {
        (self.width / self.patch_stride) as usize
    }
}

/// Round-half-up, `floor(v / s + 0.5)`, clamped to `[0, limit]`.
fn nearest_boundary(v: f64, stride: f64, limit: usize) -> usize {
    let idx = (v / stride + 0.5).floor();
    if idx <= 0.0 {
        0
    } else {
        (idx as usize).min(limit)
    }
}

/// One-cell range holding `mid`.
fn cell_at(mid: f64, stride: f64, limit: usize) -> (usize, usize) {
    let idx = (mid / stride).floor();
    let idx = if idx <= 0.0 { 0 } else { idx as usize };
    let idx = idx.min(limit.saturating_sub(1));
    (idx, idx + 1)
}

/// Maps a pixel box to feature-map cells by rounding each edge to the
/// nearest cell boundary. An empty axis is widened to the single cell
/// containing the box midpoint, so the result always holds at least one cell.
pub fn to_patch_indices(bbox: &PixelBox, frame: &ImageFrame) -> Result<CellRange, GeometryError> {
    frame.validate()?;
    let s = frame.patch_stride as f64;
    let (rows, cols) = (frame.cell_rows(), frame.cell_cols());

    let mut row = (
        nearest_boundary(bbox.y1, s, rows),
        nearest_boundary(bbox.y2, s, rows),
    );
    if row.1 <= row.0 {
        row = cell_at((bbox.y1 + bbox.y2) / 2.0, s, rows);
    }
    let mut col = (
        nearest_boundary(bbox.x1, s, cols),
        nearest_boundary(bbox.x2, s, cols),
    );
    if col.1 <= col.0 {
        col = cell_at((bbox.x1 + bbox.x2) / 2.0, s, cols);
    }
    Ok(CellRange {
        row_start: row.0,
        row_end: row.1,
        col_start: col.0,
        col_end: col.1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxForm {
    Corner,
    Center,
}

/// A box with every component divided by the frame extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedBox {
    pub form: BoxForm,
    pub values: [f64; 4],
}

impl NormalizedBox {
    pub fn as_center(&self) -> CenterBox {
        match self.form {
            BoxForm::Center => CenterBox::from_array(self.values),
            BoxForm::Corner => {
                let [x1, y1, x2, y2] = self.values;
                CenterBox::from_corners(x1, y1, x2, y2)
            }
        }
    }

    pub fn to_pixel(&self, frame: &ImageFrame) -> Result<PixelBox, GeometryError> {
        let (w, h) = frame_extent(frame)?;
        let [x1, y1, x2, y2] = match self.form {
            BoxForm::Corner => self.values,
            BoxForm::Center => CenterBox::from_array(self.values).to_corners(),
        };
        Ok(PixelBox::new(x1 * w, y1 * h, x2 * w, y2 * h))
    }
}

fn frame_extent(frame: &ImageFrame) -> Result<(f64, f64), GeometryError> {
    if frame.width == 0 || frame.height == 0 {
        return Err(GeometryError::InvalidFrame(format!(
            "zero-size frame {}x{}",
            frame.width, frame.height
        )));
    }
    Ok((frame.width as f64, frame.height as f64))
}

pub fn normalize_box(
    bbox: &PixelBox,
    frame: &ImageFrame,
    form: BoxForm,
) -> Result<NormalizedBox, GeometryError> {
    let (w, h) = frame_extent(frame)?;
    let values = match form {
        BoxForm::Corner => [bbox.x1 / w, bbox.y1 / h, bbox.x2 / w, bbox.y2 / h],
        BoxForm::Center => [
            (bbox.x1 + bbox.x2) / (2.0 * w),
            (bbox.y1 + bbox.y2) / (2.0 * h),
            (bbox.x2 - bbox.x1) / w,
            (bbox.y2 - bbox.y1) / h,
        ],
    };
    Ok(NormalizedBox { form, values })
}

/// Grows each side by `margin_fraction` of the box extent on that axis and
/// clamps the result to the frame.
pub fn expand_box(bbox: &PixelBox, frame: &ImageFrame, margin_fraction: f64) -> PixelBox {
    let margin = margin_fraction.max(0.0);
    let dx = margin * bbox.width();
    let dy = margin * bbox.height();
    clamp_to_frame(
        PixelBox::new(bbox.x1 - dx, bbox.y1 - dy, bbox.x2 + dx, bbox.y2 + dy),
        frame,
    )
}

fn clamp_to_frame(bbox: PixelBox, frame: &ImageFrame) -> PixelBox {
    let (w, h) = (frame.width as f64, frame.height as f64);
    PixelBox::new(
        bbox.x1.clamp(0.0, w),
        bbox.y1.clamp(0.0, h),
        bbox.x2.clamp(0.0, w),
        bbox.y2.clamp(0.0, h),
    )
}

/// Swap-repairs, clamps and checks a raw box against a frame.
///
/// A point box inside the frame is accepted; a box whose positive area is
/// lost entirely to clamping is rejected as out-of-frame.
pub fn validate_box(raw: [f64; 4], frame: &ImageFrame) -> Result<PixelBox, GeometryError> {
    let ordered = PixelBox::from_raw(raw)?;
    let clamped = clamp_to_frame(ordered, frame);
    let outside = ordered.x2 < 0.0
        || ordered.y2 < 0.0
        || ordered.x1 > frame.width as f64
        || ordered.y1 > frame.height as f64;
    if outside || (ordered.area() > 0.0 && clamped.area() == 0.0) {
        return Err(GeometryError::OutOfFrame {
            x1: raw[0],
            y1: raw[1],
            x2: raw[2],
            y2: raw[3],
            width: frame.width,
            height: frame.height,
        });
    }
    Ok(clamped)
}
