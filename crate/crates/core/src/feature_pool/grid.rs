use serde::{Deserialize, Serialize};

use super::{PoolError, PoolingConfig};
use crate::geometry::{ImageFrame, PixelBox};

/// Crops in the reference AnyRes setup that budgets are compared against.
pub const BASELINE_CROPS: usize = 4;

/// AnyRes crop layout and the resized frame it implies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: u32,
    pub patch_stride: u32,
    /// Resized width, `cols * patch_size`.
    pub width: u32,
    /// Resized height, `rows * patch_size`.
    pub height: u32,
    pub original_width: u32,
    pub original_height: u32,
    /// `width / original_width`.
    pub scale_x: f64,
    /// `height / original_height`.
    pub scale_y: f64,
}

impl GridSpec {
    /// A layout whose original image already has the resized dimensions.
    pub fn from_layout(
        rows: usize,
        cols: usize,
        patch_size: u32,
        patch_stride: u32,
    ) -> Result<Self, PoolError> {
        if rows == 0 || cols == 0 {
            return Err(PoolError::InvalidConfig(format!("empty layout {rows}x{cols}")));
        }
        let width = cols as u32 * patch_size;
        let height = rows as u32 * patch_size;
        Self::with_original(rows, cols, patch_size, patch_stride, width, height)
    }

    fn with_original(
        rows: usize,
        cols: usize,
        patch_size: u32,
        patch_stride: u32,
        original_width: u32,
        original_height: u32,
    ) -> Result<Self, PoolError> {
        let width = cols as u32 * patch_size;
        let height = rows as u32 * patch_size;
        ImageFrame::new(width, height, patch_size, patch_stride)?;
        Ok(Self {
            rows,
            cols,
            patch_size,
            patch_stride,
            width,
            height,
            original_width,
            original_height,
            scale_x: width as f64 / original_width as f64,
            scale_y: height as f64 / original_height as f64,
        })
    }

    pub fn crops(&self) -> usize {
        self.rows * self.cols
    }

    /// Cells along one side of a crop, `p / s`.
    pub fn cells_per_side(&self) -> usize {
        (self.patch_size / self.patch_stride) as usize
    }

    pub fn frame(&self) -> ImageFrame {
        ImageFrame {
            width: self.width,
            height: self.height,
            patch_size: self.patch_size,
            patch_stride: self.patch_stride,
        }
    }

    /// Maps a box given in original-image pixels into the resized frame.
    pub fn to_resized(&self, bbox: PixelBox) -> PixelBox {
        bbox.scale(self.scale_x, self.scale_y)
    }

    pub fn to_original(&self, bbox: PixelBox) -> PixelBox {
        bbox.scale(1.0 / self.scale_x, 1.0 / self.scale_y)
    }
}

/// Picks the crop layout for an image.
///
/// Candidates are every `rows x cols` with `rows * cols <= max_crops`. The
/// winner has the smallest log aspect-ratio distortion; ties go to the
/// largest effective resolution (original pixels preserved after fitting the
/// image into the layout), then to fewer crops.
pub fn select_grid(
    original_width: u32,
    original_height: u32,
    patch_size: u32,
    patch_stride: u32,
    max_crops: usize,
) -> Result<GridSpec, PoolError> {
    if original_width == 0 || original_height == 0 {
        return Err(PoolError::InvalidConfig("image has zero size".into()));
    }
    if max_crops > super::MAX_CROPS_LIMIT {
        return Err(PoolError::InvalidConfig(format!(
            "max_crops {max_crops} exceeds {}",
            super::MAX_CROPS_LIMIT
        )));
    }
    let max_crops = max_crops.max(1);
    let (w0, h0) = (original_width as f64, original_height as f64);
    let target = (w0 / h0).ln();
    const TIE: f64 = 1e-12;

    let mut best: Option<(f64, f64, usize, usize, usize)> = None;
    for rows in 1..=max_crops {
        for cols in 1..=max_crops / rows {
            let distortion = ((cols as f64 / rows as f64).ln() - target).abs();
            let (cw, ch) = (cols as f64 * patch_size as f64, rows as f64 * patch_size as f64);
            let fit = (cw / w0).min(ch / h0);
            let effective = (w0 * fit * h0 * fit).min(w0 * h0);
            let crops = rows * cols;
            let better = match best {
                None => true,
                Some((bd, be, bc, _, _)) => {
                    if distortion < bd - TIE {
                        true
                    } else if distortion > bd + TIE {
                        false
                    } else if effective > be * (1.0 + TIE) {
                        true
                    } else if effective < be * (1.0 - TIE) {
                        false
                    } else {
                        crops < bc
                    }
                }
            };
            if better {
                best = Some((distortion, effective, crops, rows, cols));
            }
        }
    }
    let (_, _, _, rows, cols) = best.expect("max_crops >= 1 yields a candidate");
    GridSpec::with_original(
        rows,
        cols,
        patch_size,
        patch_stride,
        original_width,
        original_height,
    )
}

/// Visual token accounting for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub crops: usize,
    pub cells_per_side: usize,
    pub snapshot_tokens: usize,
    pub local_tokens: usize,
    pub total: usize,
    pub baseline_crops: usize,
    pub baseline_total: usize,
    pub ratio: f64,
}

pub fn token_budget(grid: &GridSpec, pooling: &PoolingConfig) -> BudgetReport {
    token_budget_for(grid.crops(), grid.cells_per_side(), pooling, BASELINE_CROPS)
}

/// Budget from a bare crop count; the layout shape does not matter. A
/// single crop covers the same area as the snapshot and is not sent.
pub fn token_budget_for(
    crops: usize,
    cells_per_side: usize,
    pooling: &PoolingConfig,
    baseline_crops: usize,
) -> BudgetReport {
    let pooled = |stride: usize| cells_per_side.div_ceil(stride.max(1)).pow(2);
    let snapshot_tokens = pooled(pooling.snapshot_stride);
    let local_tokens = if crops > 1 { crops * pooled(pooling.local_stride) } else { 0 };
    let total = snapshot_tokens + local_tokens;
    let baseline_total = (1 + baseline_crops) * cells_per_side * cells_per_side;
    BudgetReport {
        crops,
        cells_per_side,
        snapshot_tokens,
        local_tokens,
        total,
        baseline_crops,
        baseline_total,
        ratio: total as f64 / baseline_total as f64,
    }
}
