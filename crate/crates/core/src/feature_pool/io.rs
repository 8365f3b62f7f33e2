//! Binary pool layout.
//!
//! Header: sixteen little-endian `u32` words
//!
//! | word | field |
//! |------|-------|
//! | 0 | magic `0x50524756` (`"VGRP"`) |
//! | 1 | format version (1) |
//! | 2, 3, 4 | map height, map width, channels |
//! | 5, 6 | layout rows, layout cols |
//! | 7, 8 | patch size, patch stride |
//! | 9, 10, 11 | snapshot, local, replay pooling strides |
//! | 12, 13 | pooled snapshot height, width |
//! | 14, 15 | pooled local crop height, width |
//!
//! Payload: little-endian `f32`, row-major with channels innermost: the
//! unified map, then the pooled snapshot, then each pooled local crop in
//! row-major crop order. The JSON sidecar ([`PoolMetadata`]) carries the
//! values that do not fit in integers (scale factors, encoder name).

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{FeaturePool, GridSpec, PoolError, PoolingConfig, TokenGrid};

pub const POOL_MAGIC: u32 = 0x5052_4756;
pub const POOL_VERSION: u32 = 1;
const HEADER_WORDS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolMetadata {
    pub format_version: u32,
    pub encoder: String,
    pub grid: GridSpec,
    pub pooling: PoolingConfig,
    pub channels: usize,
    pub snapshot_tokens: usize,
    pub local_tokens: usize,
}

impl PoolMetadata {
    pub fn of(pool: &FeaturePool) -> Self {
        Self {
            format_version: POOL_VERSION,
            encoder: pool.encoder.clone(),
            grid: pool.grid,
            pooling: pool.pooling,
            channels: pool.channels(),
            snapshot_tokens: pool.snapshot.cell_count(),
            local_tokens: pool.locals.iter().map(TokenGrid::cell_count).sum(),
        }
    }
}

fn word(v: usize) -> Result<u32, PoolError> {
    u32::try_from(v).map_err(|_| PoolError::Format(format!("{v} does not fit in u32")))
}

/// Writes the binary layout and returns the sidecar metadata.
pub fn write_pool(pool: &FeaturePool, mut out: impl Write) -> Result<PoolMetadata, PoolError> {
    let (lh, lw) = pool
        .locals
        .first()
        .map(|g| (g.height, g.width))
        .unwrap_or((0, 0));
    let header = [
        POOL_MAGIC,
        POOL_VERSION,
        word(pool.map.height)?,
        word(pool.map.width)?,
        word(pool.map.channels)?,
        word(pool.grid.rows)?,
        word(pool.grid.cols)?,
        pool.grid.patch_size,
        pool.grid.patch_stride,
        word(pool.pooling.snapshot_stride)?,
        word(pool.pooling.local_stride)?,
        word(pool.pooling.replay_stride)?,
        word(pool.snapshot.height)?,
        word(pool.snapshot.width)?,
        word(lh)?,
        word(lw)?,
    ];
    for w in header {
        out.write_all(&w.to_le_bytes())?;
    }
    let grids = std::iter::once(&pool.map)
        .chain(std::iter::once(&pool.snapshot))
        .chain(pool.locals.iter());
    for g in grids {
        for v in &g.values {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(PoolMetadata::of(pool))
}

fn read_grid(
    input: &mut impl Read,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<TokenGrid, PoolError> {
    let n = height * width * channels;
    let mut bytes = vec![0u8; n * 4];
    input.read_exact(&mut bytes)?;
    let values = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(TokenGrid {
        height,
        width,
        channels,
        values,
    })
}

/// Reads a pool written by [`write_pool`]. Values come back at `f32`
/// precision.
pub fn read_pool(mut input: impl Read, meta: &PoolMetadata) -> Result<FeaturePool, PoolError> {
    let mut raw = [0u8; HEADER_WORDS * 4];
    input.read_exact(&mut raw)?;
    let h: Vec<usize> = raw
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
        .collect();
    if h[0] as u32 != POOL_MAGIC {
        return Err(PoolError::Format(format!("bad magic {:#010x}", h[0])));
    }
    if h[1] as u32 != POOL_VERSION || meta.format_version != POOL_VERSION {
        return Err(PoolError::Format(format!("unsupported version {}", h[1])));
    }
    let g = &meta.grid;
    let n = g.cells_per_side();
    let expected = [
        g.rows * n,
        g.cols * n,
        meta.channels,
        g.rows,
        g.cols,
        g.patch_size as usize,
        g.patch_stride as usize,
        meta.pooling.snapshot_stride,
        meta.pooling.local_stride,
        meta.pooling.replay_stride,
    ];
    if h[2..12] != expected {
        return Err(PoolError::Format(format!(
            "header {:?} disagrees with metadata {:?}",
            &h[2..12],
            expected
        )));
    }
    let channels = h[4];
    let map = read_grid(&mut input, h[2], h[3], channels)?;
    let snapshot = read_grid(&mut input, h[12], h[13], channels)?;
    let locals = (0..g.crops())
        .map(|_| read_grid(&mut input, h[14], h[15], channels))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FeaturePool {
        map,
        snapshot,
        locals,
        grid: meta.grid,
        pooling: meta.pooling,
        encoder: meta.encoder.clone(),
    })
}
