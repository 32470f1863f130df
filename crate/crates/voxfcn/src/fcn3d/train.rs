//! SGD training loop: one scene per step, shuffled scene order per epoch,
//! negative subsampling in the objectness sum.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor_nn::SgdOptimizer;
use crate::voxel::{TargetVolume, VoxelGrid};

use super::{backward, forward, loss::total_loss, ArchConfig, Fcn3dError, NetworkParams};

/// Floor on the sampled negative set per step.
pub const MIN_NEGATIVES_PER_STEP: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Balance weight on the box loss.
    pub box_weight: f64,
    pub lr: f32,
    pub momentum: f32,
    pub epochs: usize,
    /// Sampled negatives per step = max(neg_pos_ratio * positives, 256).
    pub neg_pos_ratio: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            box_weight: 0.02,
            lr: 0.005,
            momentum: 0.9,
            epochs: 12,
            neg_pos_ratio: 8,
            seed: 0,
        }
    }
}

/// Mean per-scene losses over one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_objectness: f64,
    pub mean_box: f64,
    pub mean_total: f64,
}

/// Trains a fresh network (init from `cfg.seed`) on the given scenes.
/// Deterministic under the seed in single-threaded mode; parallel kernel
/// dispatch does not change results because every output element keeps a
/// fixed reduction order.
pub fn train(
    scenes: &[(VoxelGrid, TargetVolume)],
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<(NetworkParams, Vec<EpochStats>), Fcn3dError> {
    if scenes.is_empty() {
        return Err(Fcn3dError::Train("no training scenes".into()));
    }
    let mut params = NetworkParams::init(cfg.seed, arch)?;
    let mut opt = SgdOptimizer::new(cfg.lr, cfg.momentum, &params.tensors())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x74726169); // decorrelate from init stream

    // negative index lists are fixed per scene; sampled fresh each visit
    let negatives: Vec<Vec<usize>> = scenes.iter().map(|(_, t)| t.negative_cells()).collect();

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum_obj = 0.0f64;
        let mut sum_box = 0.0f64;
        for &scene_idx in &order {
            let (grid, targets) = &scenes[scene_idx];
            let negs = &negatives[scene_idx];
            let want = (cfg.neg_pos_ratio * targets.num_positive()).max(MIN_NEGATIVES_PER_STEP);
            let mut active: Vec<usize> = targets.positive_cells().to_vec();
            if negs.len() <= want {
                active.extend_from_slice(negs);
            } else {
                active.extend(sample(&mut rng, negs.len(), want).into_iter().map(|i| negs[i]));
            }

            let (maps, cache) = forward(grid, &params)?;
            let (total, obj, bx, grad_obj, grad_box) =
                total_loss(&maps, targets, cfg.box_weight, Some(&active));
            if !total.is_finite() {
                return Err(Fcn3dError::Train(format!(
                    "non-finite loss at epoch {epoch}, scene {scene_idx}: objectness {obj}, box {bx}"
                )));
            }
            sum_obj += obj;
            sum_box += bx;

            let grads = backward(&params, &cache, &grad_obj, &grad_box)?;
            opt.step(&mut params.tensors_mut(), &grads.tensors())?;
        }
        let n = scenes.len() as f64;
        history.push(EpochStats {
            epoch,
            mean_objectness: sum_obj / n,
            mean_box: sum_box / n,
            mean_total: (sum_obj + cfg.box_weight * sum_box) / n,
        });
    }
    Ok((params, history))
}
