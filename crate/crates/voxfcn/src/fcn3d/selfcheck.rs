//! Full-network gradient verification: central differences of the training
//! loss with respect to every parameter tensor.
//!
//! ReLU kinks are excluded by construction: the probe function re-runs the
//! forward pass with the activation masks frozen at the check point, so every
//! probed perturbation stays on the same smooth piece of the network while the
//! analytic gradient (which uses exactly those masks) is unchanged.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor_nn::{grad_check, Tensor};
use crate::voxel::{box_corners, CellLabel, GridSpec, OrientedBox3D, TargetVolume, VoxelGrid};

use super::{
    backward, forward, forward_tensor, loss::total_loss, ArchConfig, Fcn3dError, NetworkParams,
    ReluMasks,
};

const PARAM_NAMES: [&str; 10] = [
    "conv1 kernel",
    "conv1 bias",
    "conv2 kernel",
    "conv2 bias",
    "conv3 kernel",
    "conv3 bias",
    "deconv4a kernel",
    "deconv4a bias",
    "deconv4b kernel",
    "deconv4b bias",
];

fn targets_for_boxes(spec: &GridSpec, boxes: &[OrientedBox3D]) -> TargetVolume {
    // direct sensor-frame construction (no label/calib detour)
    let n = spec.num_cells();
    let mut labels = vec![CellLabel::Negative; n];
    let mut positive_cells = Vec::new();
    let mut offsets = Vec::new();
    for b in boxes {
        let radius = 0.25 * b.length().min(b.width());
        let corners = box_corners(b);
        for f in 0..n {
            let c = spec.center_unchecked(spec.unflatten(f));
            let d2 = (c[0] - b.center[0]).powi(2)
                + (c[1] - b.center[1]).powi(2)
                + (c[2] - b.center[2]).powi(2);
            if d2.sqrt() <= radius && labels[f] != CellLabel::Positive {
                labels[f] = CellLabel::Positive;
                let mut off = [0.0f32; 24];
                for (k, corner) in corners.iter().enumerate() {
                    for a in 0..3 {
                        off[3 * k + a] = (corner[a] - c[a]) as f32;
                    }
                }
                positive_cells.push(f);
                offsets.push(off);
            }
        }
    }
    let mut order: Vec<usize> = (0..positive_cells.len()).collect();
    order.sort_by_key(|&i| positive_cells[i]);
    TargetVolume::from_parts(
        spec.dims(),
        labels,
        order.iter().map(|&i| positive_cells[i]).collect(),
        order.iter().map(|&i| offsets[i]).collect(),
    )
}

/// Runs the full-loss finite-difference check on a random 16^3 scene.
/// Returns `(parameter name, max relative error)` per tensor.
pub fn full_loss_grad_check(
    arch: &ArchConfig,
    box_weight: f64,
    seed: u64,
    step: f32,
    coords_per_tensor: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(String, f64)>, Fcn3dError> {
    let spec = GridSpec::new([0.0, -3.2, -3.2], 0.4, [16, 16, 16])
        .expect("static 16^3 grid is valid");
    let boxes = [
        OrientedBox3D::new([2.8, -0.9, 0.1], [4.0, 1.8, 1.5], 0.7).unwrap(),
        OrientedBox3D::new([4.6, 1.6, -0.3], [3.8, 1.7, 1.4], -1.9).unwrap(),
    ];
    let targets = targets_for_boxes(&spec, &boxes);

    // random occupancy with the boxes' neighborhoods filled densely
    let mut grid_data = Tensor::zeros(&[1, 16, 16, 16]);
    for f in 0..spec.num_cells() {
        let c = spec.center_unchecked(spec.unflatten(f));
        let near_box = boxes.iter().any(|b| b.contains(c));
        let p = if near_box { 0.7 } else { 0.08 };
        if rng.gen_bool(p) {
            grid_data.data_mut()[f] = 1.0;
        }
    }
    let grid = VoxelGrid {
        spec: spec.clone(),
        data: grid_data,
    };

    // positives plus a fixed sampled negative subset keep the loss sum small
    // enough that f32 forward rounding stays well under the error threshold
    let negs = targets.negative_cells();
    let mut active: Vec<usize> = targets.positive_cells().to_vec();
    active.extend(sample(rng, negs.len(), 64.min(negs.len())).into_iter().map(|i| negs[i]));

    let params = NetworkParams::init(seed.wrapping_add(1), arch)?;
    let (maps, cache) = forward(&grid, &params)?;
    let masks = ReluMasks::of(&cache);
    let (_, _, _, grad_obj, grad_box) = total_loss(&maps, &targets, box_weight, Some(&active));
    let grads = backward(&params, &cache, &grad_obj, &grad_box)?;

    let mut results = Vec::with_capacity(10);
    let param_tensors = params.tensors();
    let grad_tensors = grads.tensors();
    for slot in 0..10 {
        let f = |probe: &Tensor| -> Option<f64> {
            let mut p = params.clone();
            *p.tensors_mut()[slot] = probe.clone();
            let (maps, _) = forward_tensor(&grid.data, &p, Some(&masks)).ok()?;
            let (total, _, _, _, _) = total_loss(&maps, &targets, box_weight, Some(&active));
            Some(total)
        };
        let r = grad_check(
            f,
            param_tensors[slot],
            grad_tensors[slot],
            step,
            coords_per_tensor,
            rng,
        );
        results.push((PARAM_NAMES[slot].to_string(), r.max_rel_err));
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn full_network_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let results = full_loss_grad_check(&ArchConfig::default(), 0.02, 100, 1e-3, 24, &mut rng)
            .unwrap();
        assert_eq!(results.len(), 10);
        for (name, err) in results {
            assert!(err < 1e-3, "{name}: max rel err {err}");
        }
    }
}
