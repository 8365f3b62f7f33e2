//! The replay memory: AnyRes crop layout, per-crop encoding, the unified
//! feature map and the pooled input tokens.
//!
//! The unified map `S` covers the resized frame at one cell per vision patch,
//! so a pixel box maps onto it through [`crate::geometry::to_patch_indices`].

mod encoder;
mod grid;
mod image;
mod io;
mod tensor;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use encoder::{ConstantEncoder, CoordinateEncoder, Crop, CropEncoder, CropKind, PatchMeanEncoder};
pub use grid::{select_grid, token_budget, token_budget_for, BudgetReport, GridSpec, BASELINE_CROPS};
pub use image::PixelGrid;
pub use io::{read_pool, write_pool, PoolMetadata, POOL_MAGIC, POOL_VERSION};
pub use tensor::{pool_grid, TokenGrid, TokenSequence};

use crate::geometry::{self, CellRange, GeometryError, PixelBox};

pub const DEFAULT_MAX_CROPS: usize = 16;
pub const MAX_CROPS_LIMIT: usize = 64;

#[derive(Debug, Error)]
pub enum PoolError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("encoder contract violated for {crop}: expected {expected}, got {found}")]
    EncoderContract {
        crop: String,
        expected: String,
        found: String,
    },
    #[error("encoder failed on {crop}: {message}")]
    Encode { crop: String, message: String },
    #[error("image size mismatch: {0}")]
    ImageSize(String),
    #[error("image decode: {0}")]
    Image(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("pool serialization: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Pooling window (= stride) sizes for the three token streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolingConfig {
    pub snapshot_stride: usize,
    pub local_stride: usize,
    pub replay_stride: usize,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        Self {
            snapshot_stride: 2,
            local_stride: 4,
            replay_stride: 2,
        }
    }
}

impl PoolingConfig {
    /// No compression anywhere.
    pub fn identity() -> Self {
        Self {
            snapshot_stride: 1,
            local_stride: 1,
            replay_stride: 1,
        }
    }

    pub fn validate(&self) -> Result<(), PoolError> {
        if self.snapshot_stride == 0 || self.local_stride == 0 || self.replay_stride == 0 {
            return Err(PoolError::InvalidConfig(format!(
                "pooling strides must be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Immutable per-image replay memory.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePool {
    /// Unified map `S`, `(H/s) x (W/s) x c`.
    pub map: TokenGrid,
    /// Snapshot grid after snapshot pooling.
    pub snapshot: TokenGrid,
    /// Local crop grids after local pooling, row-major crop order.
    pub locals: Vec<TokenGrid>,
    pub grid: GridSpec,
    pub pooling: PoolingConfig,
    pub encoder: String,
}

impl FeaturePool {
    pub fn frame(&self) -> geometry::ImageFrame {
        self.grid.frame()
    }

    pub fn channels(&self) -> usize {
        self.map.channels
    }

    /// Local grids sent as input. Empty for a 1x1 layout, where the snapshot
    /// already covers the single crop.
    pub fn input_locals(&self) -> &[TokenGrid] {
        if self.grid.crops() > 1 {
            &self.locals
        } else {
            &[]
        }
    }

    /// Input image tokens: pooled snapshot, then each pooled local crop.
    pub fn input_tokens(&self) -> TokenSequence {
        let mut seq = self.snapshot.flatten();
        for local in self.input_locals() {
            seq.extend(&local.flatten());
        }
        seq
    }

    pub fn budget(&self) -> BudgetReport {
        token_budget(&self.grid, &self.pooling)
    }

    /// Cells of `S` selected by a (validated) pixel box.
    pub fn cells_for(&self, bbox: &PixelBox) -> Result<CellRange, GeometryError> {
        geometry::to_patch_indices(bbox, &self.frame())
    }
}

fn crop_label(kind: CropKind) -> String {
    match kind {
        CropKind::Snapshot => "snapshot".into(),
        CropKind::Local { row, col } => format!("crop({row},{col})"),
    }
}

fn encode_checked(encoder: &dyn CropEncoder, crop: &Crop<'_>) -> Result<TokenGrid, PoolError> {
    let n = crop.cells_per_side;
    let c = encoder.channels();
    let out = encoder.encode(crop).map_err(|message| PoolError::Encode {
        crop: crop_label(crop.kind),
        message,
    })?;
    if out.height != n || out.width != n || out.channels != c || !out.is_consistent() {
        return Err(PoolError::EncoderContract {
            crop: crop_label(crop.kind),
            expected: format!("{n}x{n}x{c} finite"),
            found: format!("{}x{}x{} ({} values)", out.height, out.width, out.channels, out.values.len()),
        });
    }
    Ok(out)
}

/// Encodes the snapshot and every local crop and assembles the unified map.
///
/// `image` must already be resized to the layout's `W x H`. Crops are encoded
/// in parallel; assembly order is fixed.
pub fn build_pool(
    image: &PixelGrid,
    grid: &GridSpec,
    encoder: &dyn CropEncoder,
    pooling: &PoolingConfig,
) -> Result<FeaturePool, PoolError> {
    pooling.validate()?;
    grid.frame().validate()?;
    if image.width != grid.width || image.height != grid.height {
        return Err(PoolError::ImageSize(format!(
            "image is {}x{}, layout expects {}x{}",
            image.width, image.height, grid.width, grid.height
        )));
    }
    let n = grid.cells_per_side();
    let p = grid.patch_size;
    fn crop_of(pixels: &PixelGrid, kind: CropKind, n: usize, s: u32) -> Crop<'_> {
        Crop {
            kind,
            pixels,
            cells_per_side: n,
            patch_stride: s,
        }
    }
    let s = grid.patch_stride;

    let snapshot_pixels = image.resize(p, p);
    let snapshot = encode_checked(encoder, &crop_of(&snapshot_pixels, CropKind::Snapshot, n, s))?;

    let locals: Vec<TokenGrid> = (0..grid.crops())
        .into_par_iter()
        .map(|i| {
            let (row, col) = (i / grid.cols, i % grid.cols);
            let pixels = image.crop(col as u32 * p, row as u32 * p, p, p);
            encode_checked(encoder, &crop_of(&pixels, CropKind::Local { row, col }, n, s))
        })
        .collect::<Result<_, _>>()?;

    let mut map = TokenGrid::zeros(grid.rows * n, grid.cols * n, encoder.channels());
    for (i, local) in locals.iter().enumerate() {
        map.paste(local, (i / grid.cols) * n, (i % grid.cols) * n);
    }

    Ok(FeaturePool {
        map,
        snapshot: pool_grid(&snapshot, pooling.snapshot_stride),
        locals: locals
            .iter()
            .map(|g| pool_grid(g, pooling.local_stride))
            .collect(),
        grid: *grid,
        pooling: *pooling,
        encoder: encoder.name().to_string(),
    })
}

/// Builds a pool over a blank canvas; for pixel-independent encoders.
pub fn build_pool_blank(
    grid: &GridSpec,
    encoder: &dyn CropEncoder,
    pooling: &PoolingConfig,
) -> Result<FeaturePool, PoolError> {
    let canvas = PixelGrid::filled(grid.width, grid.height, [0, 0, 0]);
    build_pool(&canvas, grid, encoder, pooling)
}

/// Tokens replayed for a box: the covered slice of `S`, pooled at the replay
/// stride and flattened row-major. Never empty.
pub fn replay_tokens(pool: &FeaturePool, bbox: &PixelBox) -> Result<TokenSequence, GeometryError> {
    let cells = pool.cells_for(bbox)?;
    Ok(replay_cells(pool, &cells))
}

pub fn replay_cells(pool: &FeaturePool, cells: &CellRange) -> TokenSequence {
    pool_grid(&pool.map.slice(cells), pool.pooling.replay_stride).flatten()
}
