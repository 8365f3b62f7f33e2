use super::image::PixelGrid;
use super::tensor::TokenGrid;

/// Which crop of the AnyRes layout is being encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropKind {
    /// The whole image resized to one `p x p` crop.
    Snapshot,
    /// Local crop at `(row, col)` of the layout.
    Local { row: usize, col: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct Crop<'a> {
    pub kind: CropKind,
    pub pixels: &'a PixelGrid,
    /// `p / s`
    pub cells_per_side: usize,
    pub patch_stride: u32,
}

/// Vision encoder plus adapter for one crop. Implementations must return a
/// `cells_per_side x cells_per_side x channels()` grid.
pub trait CropEncoder: Sync {
    fn channels(&self) -> usize;

    fn encode(&self, crop: &Crop<'_>) -> Result<TokenGrid, String>;

    fn name(&self) -> &str;
}

/// Encodes every cell as a closed-form function of its global position so
/// the assembled map can be checked exactly.
///
/// Local cells hold `row * 1000 + col + channel * 1_000_000` in global map
/// coordinates. Snapshot cells hold `-(1 + row * 1000 + col) - channel * 1_000_000`.
#[derive(Debug, Clone, Copy)]
pub struct CoordinateEncoder {
    pub channels: usize,
}

impl CoordinateEncoder {
    pub const CHANNEL_OFFSET: f64 = 1_000_000.0;

    pub fn local_value(global_row: usize, global_col: usize, channel: usize) -> f64 {
        (global_row * 1000 + global_col) as f64 + channel as f64 * Self::CHANNEL_OFFSET
    }

    pub fn snapshot_value(row: usize, col: usize, channel: usize) -> f64 {
        -((1 + row * 1000 + col) as f64) - channel as f64 * Self::CHANNEL_OFFSET
    }
}

impl CropEncoder for CoordinateEncoder {
    fn channels(&self) -> usize {
        self.channels
    }

    fn encode(&self, crop: &Crop<'_>) -> Result<TokenGrid, String> {
        let n = crop.cells_per_side;
        Ok(match crop.kind {
            CropKind::Snapshot => TokenGrid::from_fn(n, n, self.channels, Self::snapshot_value),
            CropKind::Local { row, col } => TokenGrid::from_fn(n, n, self.channels, |r, c, ch| {
                Self::local_value(row * n + r, col * n + c, ch)
            }),
        })
    }

    fn name(&self) -> &str {
        "coordinate"
    }
}

/// Emits the same vector for every cell.
#[derive(Debug, Clone)]
pub struct ConstantEncoder {
    pub value: Vec<f64>,
}

impl CropEncoder for ConstantEncoder {
    fn channels(&self) -> usize {
        self.value.len()
    }

    fn encode(&self, crop: &Crop<'_>) -> Result<TokenGrid, String> {
        let n = crop.cells_per_side;
        Ok(TokenGrid::from_fn(n, n, self.value.len(), |_, _, ch| self.value[ch]))
    }

    fn name(&self) -> &str {
        "constant"
    }
}

/// Mean RGB of each `s x s` patch, scaled to `[0, 1]`. A pixel-dependent
/// stand-in for a trained encoder.
#[derive(Debug, Clone, Copy, Default)]
pub struct PatchMeanEncoder;

impl CropEncoder for PatchMeanEncoder {
    fn channels(&self) -> usize {
        3
    }

    fn encode(&self, crop: &Crop<'_>) -> Result<TokenGrid, String> {
        let n = crop.cells_per_side;
        let s = crop.patch_stride;
        let px = crop.pixels;
        if px.width as usize != n * s as usize || px.height as usize != n * s as usize {
            return Err(format!(
                "crop is {}x{}, expected {}x{}",
                px.width,
                px.height,
                n * s as usize,
                n * s as usize
            ));
        }
        let norm = (s * s) as f64 * 255.0;
        Ok(TokenGrid::from_fn(n, n, 3, |r, c, ch| {
            let mut acc = 0u64;
            for y in r as u32 * s..(r as u32 + 1) * s {
                for x in c as u32 * s..(c as u32 + 1) * s {
                    acc += px.pixel(x, y)[ch] as u64;
                }
            }
            acc as f64 / norm
        }))
    }

    fn name(&self) -> &str {
        "patch_mean"
    }
}
