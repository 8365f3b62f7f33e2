use serde::{Deserialize, Serialize};

use crate::geometry::CellRange;

/// A `height x width x channels` feature grid stored row-major, channels
/// innermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl TokenGrid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            values: vec![0.0; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut values = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    values.push(f(r, c, ch));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            values,
        }
    }

    pub fn cell_count(&self) -> usize {
        self.height * self.width
    }

    pub fn is_consistent(&self) -> bool {
        self.values.len() == self.height * self.width * self.channels
            && self.values.iter().all(|v| v.is_finite())
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.values[start..start + self.channels]
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let start = (row * self.width + col) * self.channels;
        &mut self.values[start..start + self.channels]
    }

    /// Copies the cells inside `range` into a new grid.
    pub fn slice(&self, range: &CellRange) -> TokenGrid {
        let mut values = Vec::with_capacity(range.cell_count() * self.channels);
        for r in range.row_start..range.row_end {
            let start = (r * self.width + range.col_start) * self.channels;
            let end = (r * self.width + range.col_end) * self.channels;
            values.extend_from_slice(&self.values[start..end]);
        }
        TokenGrid {
            height: range.rows(),
            width: range.cols(),
            channels: self.channels,
            values,
        }
    }

    /// Writes `src` into this grid with its top-left cell at `(row, col)`.
    pub fn paste(&mut self, src: &TokenGrid, row: usize, col: usize) {
        debug_assert_eq!(src.channels, self.channels);
        for r in 0..src.height {
            let dst = ((row + r) * self.width + col) * self.channels;
            let s = r * src.width * src.channels;
            let n = src.width * src.channels;
            self.values[dst..dst + n].copy_from_slice(&src.values[s..s + n]);
        }
    }

    /// Row-major flattening into a 1D token sequence.
    pub fn flatten(&self) -> TokenSequence {
        TokenSequence {
            channels: self.channels,
            values: self.values.clone(),
        }
    }
}

/// A flat sequence of `channels`-wide tokens.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    pub channels: usize,
    pub values: Vec<f64>,
}

impl TokenSequence {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len().checked_div(self.channels).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.channels.max(1))
    }

    pub fn extend(&mut self, other: &TokenSequence) {
        debug_assert!(self.values.is_empty() || self.channels == other.channels);
        self.channels = other.channels;
        self.values.extend_from_slice(&other.values);
    }
}

/// Non-overlapping mean pooling with a square `stride x stride` window.
///
/// Trailing windows that hang over the grid edge are averaged over the cells
/// they actually cover, so output dims are `ceil(h / stride) x ceil(w / stride)`.
/// A stride of zero is treated as one.
pub fn pool_grid(grid: &TokenGrid, stride: usize) -> TokenGrid {
    let stride = stride.max(1);
    if stride == 1 {
        return grid.clone();
    }
    let out_h = grid.height.div_ceil(stride);
    let out_w = grid.width.div_ceil(stride);
    let ch = grid.channels;
    let mut out = TokenGrid::zeros(out_h, out_w, ch);
    let mut acc = vec![0.0; ch];
    for orow in 0..out_h {
        let r0 = orow * stride;
        let r1 = (r0 + stride).min(grid.height);
        for ocol in 0..out_w {
            let c0 = ocol * stride;
            let c1 = (c0 + stride).min(grid.width);
            acc.iter_mut().for_each(|a| *a = 0.0);
            for r in r0..r1 {
                for c in c0..c1 {
                    for (a, v) in acc.iter_mut().zip(grid.cell(r, c)) {
                        *a += v;
                    }
                }
            }
            let n = ((r1 - r0) * (c1 - c0)) as f64;
            for (o, a) in out.cell_mut(orow, ocol).iter_mut().zip(&acc) {
                *o = a / n;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn snapshot_pooling_counts() {
        let g = TokenGrid::zeros(24, 24, 2);
        let p2 = pool_grid(&g, 2);
        assert_eq!((p2.height, p2.width, p2.cell_count()), (12, 12, 144));
        let p4 = pool_grid(&g, 4);
        assert_eq!(p4.cell_count(), 36);
    }

    #[test]
    fn single_cell_is_fixed_point() {
        let g = TokenGrid::from_fn(1, 1, 3, |_, _, ch| ch as f64 + 0.5);
        for s in [1, 2, 4, 7] {
            assert_eq!(pool_grid(&g, s), g);
        }
    }

    #[test]
    fn partial_windows_average_members_only() {
        // 3x3 grid, stride 2: bottom-right window holds only cell (2,2).
        let g = TokenGrid::from_fn(3, 3, 1, |r, c, _| (r * 3 + c) as f64);
        let p = pool_grid(&g, 2);
        assert_eq!((p.height, p.width), (2, 2));
        assert_eq!(p.cell(0, 0), &[(0.0 + 1.0 + 3.0 + 4.0) / 4.0]);
        assert_eq!(p.cell(0, 1), &[(2.0 + 5.0) / 2.0]);
        assert_eq!(p.cell(1, 0), &[(6.0 + 7.0) / 2.0]);
        assert_eq!(p.cell(1, 1), &[8.0]);
    }

    #[test]
    fn slice_and_paste_are_inverse() {
        let g = TokenGrid::from_fn(6, 5, 2, |r, c, ch| (r * 100 + c * 10 + ch) as f64);
        let range = CellRange {
            row_start: 1,
            row_end: 4,
            col_start: 2,
            col_end: 5,
        };
        let s = g.slice(&range);
        assert_eq!(s.cell(0, 0), g.cell(1, 2));
        let mut h = TokenGrid::zeros(6, 5, 2);
        h.paste(&s, 1, 2);
        assert_eq!(h.slice(&range), s);
    }

    proptest! {
        #[test]
        fn pooled_values_lie_within_window(
            h in 1usize..12, w in 1usize..12, stride in 1usize..5,
            seed in proptest::collection::vec(-100.0f64..100.0, 144),
        ) {
            let g = TokenGrid::from_fn(h, w, 1, |r, c, _| seed[r * 12 + c]);
            let p = pool_grid(&g, stride);
            for orow in 0..p.height {
                for ocol in 0..p.width {
                    let mut lo = f64::INFINITY;
                    let mut hi = f64::NEG_INFINITY;
                    for r in orow * stride..((orow + 1) * stride).min(h) {
                        for c in ocol * stride..((ocol + 1) * stride).min(w) {
                            lo = lo.min(g.cell(r, c)[0]);
                            hi = hi.max(g.cell(r, c)[0]);
                        }
                    }
                    let v = p.cell(orow, ocol)[0];
                    prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
                }
            }
        }

        #[test]
        fn full_windows_preserve_global_mean(
            blocks in 1usize..5, stride in 1usize..5,
            seed in proptest::collection::vec(-100.0f64..100.0, 400),
        ) {
            let n = blocks * stride;
            let g = TokenGrid::from_fn(n, n, 1, |r, c, _| seed[r * 20 + c]);
            let p = pool_grid(&g, stride);
            let mean = |t: &TokenGrid| t.values.iter().sum::<f64>() / t.values.len() as f64;
            prop_assert!((mean(&g) - mean(&p)).abs() < 1e-9);
        }
    }
}
