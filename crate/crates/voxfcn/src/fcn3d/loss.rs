//! Objectness and bounding-box losses with exact gradients.
//!
//! The objectness loss is a softmax over negated logits: for a cell with
//! label L, p = exp(-o[L]) / sum_l exp(-o[l]) and the loss is -log p. This is
//! written out verbatim (it equals standard softmax cross-entropy evaluated at
//! -o, which a unit test asserts rather than silently substituting).

use crate::tensor_nn::Tensor;
use crate::voxel::{CellLabel, TargetVolume};

use super::{OutputMaps, BOXMAP_CHANNELS, OBJECTNESS_CHANNELS};

/// Per-cell negated-logit softmax loss and gradient for one labeled cell.
/// Returns (loss, grad over the 2 channels).
#[inline]
fn cell_objectness(o0: f64, o1: f64, label: usize) -> (f64, [f64; 2]) {
    // log-sum-exp of (-o0, -o1), stabilized
    let m = (-o0).max(-o1);
    let e0 = (-o0 - m).exp();
    let e1 = (-o1 - m).exp();
    let z = e0 + e1;
    let lse = m + z.ln();
    let picked = if label == 0 { o0 } else { o1 };
    let loss = lse + picked;
    // d loss / d o_k = delta(k == label) - softmax(-o)_k
    let q0 = e0 / z;
    let q1 = e1 / z;
    let mut grad = [-q0, -q1];
    grad[label] += 1.0;
    (loss, grad)
}

/// Sum of the objectness loss over every non-ignore cell.
/// Returns the scalar loss and its gradient with respect to the map.
pub fn objectness_loss(o_a: &Tensor, targets: &TargetVolume) -> (f64, Tensor) {
    let active: Vec<usize> = (0..targets.num_cells())
        .filter(|&f| targets.label(f) != CellLabel::Ignore)
        .collect();
    objectness_loss_masked(o_a, targets, &active)
}

/// Objectness loss restricted to `active` cells (each must be non-ignore).
/// Training uses this with the positive set plus a sampled negative subset.
pub fn objectness_loss_masked(
    o_a: &Tensor,
    targets: &TargetVolume,
    active: &[usize],
) -> (f64, Tensor) {
    assert_eq!(o_a.shape()[0], OBJECTNESS_CHANNELS);
    let n = targets.num_cells();
    assert_eq!(o_a.len(), OBJECTNESS_CHANNELS * n);
    let data = o_a.data();
    let mut grad = Tensor::zeros(o_a.shape());
    let gbuf = grad.data_mut();
    let mut loss = 0.0f64;
    for &f in active {
        let label = match targets.label(f) {
            CellLabel::Negative => 0,
            CellLabel::Positive => 1,
            CellLabel::Ignore => continue,
        };
        let (l, g) = cell_objectness(data[f] as f64, data[n + f] as f64, label);
        loss += l;
        gbuf[f] = g[0] as f32;
        gbuf[n + f] = g[1] as f32;
    }
    (loss, grad)
}

/// Squared L2 between predicted and target corner offsets, summed over the
/// positive set. Gradient is 2 * (prediction - target) there, zero elsewhere.
pub fn box_loss(o_b: &Tensor, targets: &TargetVolume) -> (f64, Tensor) {
    assert_eq!(o_b.shape()[0], BOXMAP_CHANNELS);
    let n = targets.num_cells();
    assert_eq!(o_b.len(), BOXMAP_CHANNELS * n);
    let data = o_b.data();
    let mut grad = Tensor::zeros(o_b.shape());
    let gbuf = grad.data_mut();
    let mut loss = 0.0f64;
    for (&f, off) in targets.positive_cells().iter().zip(targets.offsets()) {
        for (ch, &target) in off.iter().enumerate() {
            let idx = ch * n + f;
            let resid = data[idx] as f64 - target as f64;
            loss += resid * resid;
            gbuf[idx] = (2.0 * resid) as f32;
        }
    }
    (loss, grad)
}

/// Weighted sum of both losses: objectness over `active` cells plus
/// `w` times the box loss over the positive set. Returns
/// (total, objectness part, box part, grad wrt objectness, grad wrt boxmap).
pub fn total_loss(
    maps: &OutputMaps,
    targets: &TargetVolume,
    w: f64,
    active: Option<&[usize]>,
) -> (f64, f64, f64, Tensor, Tensor) {
    let (obj, grad_obj) = match active {
        Some(cells) => objectness_loss_masked(&maps.objectness, targets, cells),
        None => objectness_loss(&maps.objectness, targets),
    };
    let (bx, mut grad_box) = box_loss(&maps.boxmap, targets);
    for g in grad_box.data_mut() {
        *g *= w as f32;
    }
    (obj + w * bx, obj, bx, grad_obj, grad_box)
}
