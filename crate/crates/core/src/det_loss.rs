//! Auxiliary box-regression objective: `L = l1 + beta * l_giou`.
//!
//! The ℓ1 term works on normalized center-form boxes, the GIoU term on
//! corner form. Gradients are closed-form; [`grad_check`] compares them
//! against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::CenterBox;

pub const DEFAULT_BETA: f64 = 2.0;

/// Floor applied to union and enclosing areas.
pub const AREA_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
    pub beta: f64,
}

pub fn l1_loss(pred: &CenterBox, gt: &CenterBox) -> f64 {
    pred.to_array()
        .iter()
        .zip(gt.to_array())
        .map(|(p, g)| (p - g).abs())
        .sum()
}

/// Intersection, union and enclosing-box areas for two corner boxes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapAreas {
    pub inter: f64,
    pub union: f64,
    pub enclosing: f64,
}

pub fn overlap_areas(a: [f64; 4], b: [f64; 4]) -> OverlapAreas {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let cw = a[2].max(b[2]) - a[0].min(b[0]);
    let ch = a[3].max(b[3]) - a[1].min(b[1]);
    OverlapAreas {
        inter,
        union: area_a + area_b - inter,
        enclosing: cw * ch,
    }
}

/// `1 - (IoU - (C - U) / C)` for corner boxes `[x1, y1, x2, y2]`.
pub fn giou_loss(pred: [f64; 4], gt: [f64; 4]) -> f64 {
    let o = overlap_areas(pred, gt);
    let union = o.union.max(AREA_EPS);
    let c = o.enclosing.max(AREA_EPS);
    1.0 - (o.inter / union - (c - union) / c)
}

pub fn det_loss(pred: &CenterBox, gt: &CenterBox, beta: f64) -> LossValue {
    let l1 = l1_loss(pred, gt);
    let giou = giou_loss(pred.to_corners(), gt.to_corners());
    LossValue {
        l1,
        giou,
        total: l1 + beta * giou,
        beta,
    }
}

/// GIoU loss and its gradient with respect to the predicted corners.
fn giou_grad_corners(p: [f64; 4], g: [f64; 4]) -> (f64, [f64; 4]) {
    let (ix1, ix2) = (p[0].max(g[0]), p[2].min(g[2]));
    let (iy1, iy2) = (p[1].max(g[1]), p[3].min(g[3]));
    let iw = (ix2 - ix1).max(0.0);
    let ih = (iy2 - iy1).max(0.0);
    let inter = iw * ih;
    let (pw, ph) = (p[2] - p[0], p[3] - p[1]);
    let union_raw = pw * ph + (g[2] - g[0]) * (g[3] - g[1]) - inter;
    let cw = p[2].max(g[2]) - p[0].min(g[0]);
    let ch = p[3].max(g[3]) - p[1].min(g[1]);
    let c_raw = cw * ch;
    let union = union_raw.max(AREA_EPS);
    let c = c_raw.max(AREA_EPS);
    let loss = 1.0 - (inter / union - (c - union) / c);

    // d(iw)/d(p), d(ih)/d(p); zero when the overlap is empty on that axis.
    let overlapping_x = ix2 > ix1;
    let overlapping_y = iy2 > iy1;
    let d_iw = [
        if overlapping_x && p[0] > g[0] { -1.0 } else { 0.0 },
        0.0,
        if overlapping_x && p[2] < g[2] { 1.0 } else { 0.0 },
        0.0,
    ];
    let d_ih = [
        0.0,
        if overlapping_y && p[1] > g[1] { -1.0 } else { 0.0 },
        0.0,
        if overlapping_y && p[3] < g[3] { 1.0 } else { 0.0 },
    ];
    let d_area_p = [-ph, -pw, ph, pw];
    let d_cw = [
        if p[0] < g[0] { -1.0 } else { 0.0 },
        0.0,
        if p[2] > g[2] { 1.0 } else { 0.0 },
        0.0,
    ];
    let d_ch = [
        0.0,
        if p[1] < g[1] { -1.0 } else { 0.0 },
        0.0,
        if p[3] > g[3] { 1.0 } else { 0.0 },
    ];

    // loss = 2 - I/U - U/C
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_inter = d_iw[k] * ih + iw * d_ih[k];
        let d_union = if union_raw > AREA_EPS { d_area_p[k] - d_inter } else { 0.0 };
        let d_c = if c_raw > AREA_EPS { d_cw[k] * ch + cw * d_ch[k] } else { 0.0 };
        let d_iou = (d_inter * union - inter * d_union) / (union * union);
        let d_uc = (d_union * c - union * d_c) / (c * c);
        grad[k] = -d_iou - d_uc;
    }
    (loss, grad)
}

/// [`det_loss`] together with its gradient with respect to the predicted
/// center-form box `(x_c, y_c, w, h)`.
///
/// At ℓ1 kinks the subgradient 0 is used.
pub fn det_loss_with_grad(pred: &CenterBox, gt: &CenterBox, beta: f64) -> (LossValue, [f64; 4]) {
    let value = det_loss(pred, gt, beta);
    let mut grad: [f64; 4] = {
        let p = pred.to_array();
        let g = gt.to_array();
        std::array::from_fn(|k| match (p[k] - g[k]).partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => 1.0,
            Some(std::cmp::Ordering::Less) => -1.0,
            _ => 0.0,
        })
    };
    if beta != 0.0 {
        let (_, gc) = giou_grad_corners(pred.to_corners(), gt.to_corners());
        // x1 = xc - w/2, x2 = xc + w/2 (same for y).
        grad[0] += beta * (gc[0] + gc[2]);
        grad[1] += beta * (gc[1] + gc[3]);
        grad[2] += beta * 0.5 * (gc[2] - gc[0]);
        grad[3] += beta * 0.5 * (gc[3] - gc[1]);
    }
    (value, grad)
}

/// Central-difference gradient of `f` at `point`.
pub fn central_difference(f: impl Fn([f64; 4]) -> f64, point: [f64; 4], eps: f64) -> [f64; 4] {
    std::array::from_fn(|k| {
        let mut hi = point;
        let mut lo = point;
        hi[k] += eps;
        lo[k] -= eps;
        (f(hi) - f(lo)) / (2.0 * eps)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub analytic: [f64; 4],
    pub numeric: [f64; 4],
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub const GRAD_CHECK_TOLERANCE: f64 = 1e-3;

/// Relative error `|a - n| / max(|a|, |n|, 1e-8)` per component.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compares analytic and finite-difference gradients of `det_loss` w.r.t.
/// the prediction. Only meaningful away from ℓ1 kinks and box-edge
/// coincidences.
pub fn grad_check(pred: &CenterBox, gt: &CenterBox, beta: f64, eps: f64) -> GradCheckReport {
    let (_, analytic) = det_loss_with_grad(pred, gt, beta);
    let numeric = central_difference(
        |v| det_loss(&CenterBox::from_array(v), gt, beta).total,
        pred.to_array(),
        eps,
    );
    let max_rel_error = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, n))
        .fold(0.0, f64::max);
    GradCheckReport {
        analytic,
        numeric,
        max_rel_error,
        tolerance: GRAD_CHECK_TOLERANCE,
        passed: max_rel_error < GRAD_CHECK_TOLERANCE,
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HeadError {
    #[error("hidden state has {found} values, head expects {expected}")]
    Dimension { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Dense {
    inputs: usize,
    outputs: usize,
    /// `outputs x inputs`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

/// Maps the hidden state at `<eot>` to a normalized center-form box.
///
/// `depth - 1` ReLU layers of width `hidden_dim`, then an affine map to four
/// outputs squashed by the logistic sigmoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionHead {
    hidden_dim: usize,
    layers: Vec<Dense>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl DetectionHead {
    pub fn zeros(hidden_dim: usize) -> Self {
        Self {
            hidden_dim,
            layers: vec![Dense {
                inputs: hidden_dim,
                outputs: 4,
                weights: vec![0.0; hidden_dim * 4],
                bias: vec![0.0; 4],
            }],
        }
    }

    /// Uniform `±1/sqrt(fan_in)` initialization from a ChaCha8 stream.
    pub fn seeded(hidden_dim: usize, depth: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = depth.max(1);
        let layers = (0..depth)
            .map(|i| {
                let outputs = if i + 1 == depth { 4 } else { hidden_dim };
                let bound = 1.0 / (hidden_dim.max(1) as f64).sqrt();
                Dense {
                    inputs: hidden_dim,
                    outputs,
                    weights: (0..outputs * hidden_dim)
                        .map(|_| rng.random_range(-bound..=bound))
                        .collect(),
                    bias: (0..outputs).map(|_| rng.random_range(-bound..=bound)).collect(),
                }
            })
            .collect();
        Self { hidden_dim, layers }
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn forward(&self, hidden: &[f64]) -> Result<CenterBox, HeadError> {
        if hidden.len() != self.hidden_dim {
            return Err(HeadError::Dimension {
                expected: self.hidden_dim,
                found: hidden.len(),
            });
        }
        let (last, inner) = self.layers.split_last().expect("at least one layer");
        let mut x = hidden.to_vec();
        for layer in inner {
            x = layer.apply(&x).into_iter().map(|v| v.max(0.0)).collect();
        }
        let out = last.apply(&x);
        Ok(CenterBox::new(
            sigmoid(out[0]),
            sigmoid(out[1]),
            sigmoid(out[2]),
            sigmoid(out[3]),
        ))
    }
}
