//! The detection network: three stride-2 conv layers, ReLU after each, then
//! two stride-8 deconv heads producing the objectness map (2 channels) and the
//! bounding-box map (24 channels) at input resolution.

mod checkpoint;
mod loss;
mod selfcheck;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{box_loss, objectness_loss, objectness_loss_masked, total_loss};
pub use selfcheck::full_loss_grad_check;
pub use train::{train, EpochStats, TrainConfig, MIN_NEGATIVES_PER_STEP};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor_nn::{
    conv3d_backward, conv3d_forward, deconv3d_backward, deconv3d_forward, relu_backward,
    relu_forward, ConvLayer, DeconvLayer, NnError, Tensor,
};
use crate::voxel::VoxelGrid;

#[derive(Debug, Error)]
pub enum Fcn3dError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("bad architecture: {0}")]
    BadArch(String),
    #[error("input grid dims {0:?} are not divisible by {DOWNSAMPLE}")]
    BadInputDims([usize; 3]),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training error: {0}")]
    Train(String),
}

/// Objectness head channels: one per label value (0 = background, 1 = object).
pub const OBJECTNESS_CHANNELS: usize = 2;
/// Box head channels: 8 corners x 3 coordinates.
pub const BOXMAP_CHANNELS: usize = 24;
/// Overall downsampling of the conv trunk, undone by the deconv heads.
pub const DOWNSAMPLE: usize = 8;

const CONV_STRIDE: usize = 2;

/// Channel widths and kernel extents of the three trunk layers. Strides are
/// fixed at 2 and padding at (k-1)/2, so each layer halves the spatial dims.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchConfig {
    pub channels: [usize; 3],
    pub kernels: [usize; 3],
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64],
            kernels: [5, 5, 3],
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<(), Fcn3dError> {
        for (i, &k) in self.kernels.iter().enumerate() {
            if k % 2 == 0 || k == 0 {
                return Err(Fcn3dError::BadArch(format!(
                    "trunk kernel {i} must be odd and positive, got {k}"
                )));
            }
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Fcn3dError::BadArch("channel widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub conv3: ConvLayer,
    pub deconv4a: DeconvLayer,
    pub deconv4b: DeconvLayer,
}

/// Output maps at input resolution. Objectness channel index is the label
/// value used by the loss; the box map stores corner offsets in
/// [`crate::voxel::box_corners`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputMaps {
    pub objectness: Tensor,
    pub boxmap: Tensor,
}

/// Activations retained by [`forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Tensor,
    pub pre1: Tensor,
    pub act1: Tensor,
    pub pre2: Tensor,
    pub act2: Tensor,
    pub pre3: Tensor,
    pub act3: Tensor,
}

/// Gradients mirroring [`NetworkParams`], in checkpoint layer order.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub conv1_kernel: Tensor,
    pub conv1_bias: Tensor,
    pub conv2_kernel: Tensor,
    pub conv2_bias: Tensor,
    pub conv3_kernel: Tensor,
    pub conv3_bias: Tensor,
    pub deconv4a_kernel: Tensor,
    pub deconv4a_bias: Tensor,
    pub deconv4b_kernel: Tensor,
    pub deconv4b_bias: Tensor,
}

impl NetworkParams {
    /// Xavier-uniform kernels (+-sqrt(6 / (fan_in + fan_out))), zero biases,
    /// deterministic under the seed.
    pub fn init(seed: u64, arch: &ArchConfig) -> Result<Self, Fcn3dError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c1, c2, c3] = arch.channels;
        let [k1, k2, k3] = arch.kernels;
        let conv = |rng: &mut ChaCha8Rng, ci: usize, co: usize, k: usize| -> Result<ConvLayer, NnError> {
            ConvLayer::new(
                xavier(rng, &[co, ci, k, k, k], ci * k * k * k, co * k * k * k),
                Tensor::zeros(&[co]),
                CONV_STRIDE,
                (k - 1) / 2,
            )
        };
        let deconv = |rng: &mut ChaCha8Rng, ci: usize, co: usize| -> Result<DeconvLayer, NnError> {
            let k = DOWNSAMPLE;
            DeconvLayer::new(
                xavier(rng, &[ci, co, k, k, k], ci * k * k * k, co * k * k * k),
                Tensor::zeros(&[co]),
                k,
            )
        };
        Ok(Self {
            conv1: conv(&mut rng, 1, c1, k1)?,
            conv2: conv(&mut rng, c1, c2, k2)?,
            conv3: conv(&mut rng, c2, c3, k3)?,
            deconv4a: deconv(&mut rng, c3, OBJECTNESS_CHANNELS)?,
            deconv4b: deconv(&mut rng, c3, BOXMAP_CHANNELS)?,
        })
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            channels: [
                self.conv1.out_channels(),
                self.conv2.out_channels(),
                self.conv3.out_channels(),
            ],
            kernels: [
                self.conv1.kernel_size(),
                self.conv2.kernel_size(),
                self.conv3.kernel_size(),
            ],
        }
    }

    /// Parameter tensors in checkpoint layer order.
    pub fn tensors(&self) -> [&Tensor; 10] {
        [
            &self.conv1.kernel,
            &self.conv1.bias,
            &self.conv2.kernel,
            &self.conv2.bias,
            &self.conv3.kernel,
            &self.conv3.bias,
            &self.deconv4a.kernel,
            &self.deconv4a.bias,
            &self.deconv4b.kernel,
            &self.deconv4b.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 10] {
        [
            &mut self.conv1.kernel,
            &mut self.conv1.bias,
            &mut self.conv2.kernel,
            &mut self.conv2.bias,
            &mut self.conv3.kernel,
            &mut self.conv3.bias,
            &mut self.deconv4a.kernel,
            &mut self.deconv4a.bias,
            &mut self.deconv4b.kernel,
            &mut self.deconv4b.bias,
        ]
    }
}

impl ParamGrads {
    pub fn tensors(&self) -> [&Tensor; 10] {
        [
            &self.conv1_kernel,
            &self.conv1_bias,
            &self.conv2_kernel,
            &self.conv2_bias,
            &self.conv3_kernel,
            &self.conv3_bias,
            &self.deconv4a_kernel,
            &self.deconv4a_bias,
            &self.deconv4b_kernel,
            &self.deconv4b_bias,
        ]
    }
}

fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec_unchecked(shape.to_vec(), data)
}

/// Trunk + heads. Both heads read the same post-ReLU conv3 activation; head
/// outputs carry no activation (raw logits and regressed meters).
pub fn forward(grid: &VoxelGrid, params: &NetworkParams) -> Result<(OutputMaps, ForwardCache), Fcn3dError> {
    let dims = grid.spec.dims();
    if dims.iter().any(|&d| d % DOWNSAMPLE != 0) {
        return Err(Fcn3dError::BadInputDims(dims));
    }
    forward_tensor(&grid.data, params, None)
}

/// Forward on a raw input tensor. When `frozen` activation masks are supplied
/// the ReLUs are replaced by those fixed masks, which removes the kink
/// nonlinearity; the gradient checker uses this to probe the smooth part of
/// the map without crossing activation boundaries.
pub(crate) fn forward_tensor(
    input: &Tensor,
    params: &NetworkParams,
    frozen: Option<&ReluMasks>,
) -> Result<(OutputMaps, ForwardCache), Fcn3dError> {
    let pre1 = conv3d_forward(input, &params.conv1)?;
    let act1 = apply_relu(&pre1, frozen.map(|m| &m.m1));
    let pre2 = conv3d_forward(&act1, &params.conv2)?;
    let act2 = apply_relu(&pre2, frozen.map(|m| &m.m2));
    let pre3 = conv3d_forward(&act2, &params.conv3)?;
    let act3 = apply_relu(&pre3, frozen.map(|m| &m.m3));
    let objectness = deconv3d_forward(&act3, &params.deconv4a)?;
    let boxmap = deconv3d_forward(&act3, &params.deconv4b)?;
    debug_assert_eq!(&objectness.shape()[1..], &input.shape()[1..]);
    Ok((
        OutputMaps { objectness, boxmap },
        ForwardCache {
            input: input.clone(),
            pre1,
            act1,
            pre2,
            act2,
            pre3,
            act3,
        },
    ))
}

fn apply_relu(pre: &Tensor, mask: Option<&Vec<bool>>) -> Tensor {
    match mask {
        None => relu_forward(pre),
        Some(m) => {
            let data = pre
                .data()
                .iter()
                .zip(m.iter())
                .map(|(&v, &keep)| if keep { v } else { 0.0 })
                .collect();
            Tensor::from_vec_unchecked(pre.shape().to_vec(), data)
        }
    }
}

/// Sign pattern of the three trunk activations; two points with equal masks
/// lie on the same smooth piece of the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ReluMasks {
    pub m1: Vec<bool>,
    pub m2: Vec<bool>,
    pub m3: Vec<bool>,
}

impl ReluMasks {
    pub(crate) fn of(cache: &ForwardCache) -> Self {
        let mask = |t: &Tensor| t.data().iter().map(|&v| v > 0.0).collect();
        Self {
            m1: mask(&cache.pre1),
            m2: mask(&cache.pre2),
            m3: mask(&cache.pre3),
        }
    }
}

/// Chain rule from head gradients back to every parameter.
pub fn backward(
    params: &NetworkParams,
    cache: &ForwardCache,
    grad_objectness: &Tensor,
    grad_boxmap: &Tensor,
) -> Result<ParamGrads, Fcn3dError> {
    let (gin_a, gk4a, gb4a) = deconv3d_backward(&cache.act3, &params.deconv4a, grad_objectness)?;
    let (gin_b, gk4b, gb4b) = deconv3d_backward(&cache.act3, &params.deconv4b, grad_boxmap)?;
    let mut g_act3 = gin_a;
    for (a, b) in g_act3.data_mut().iter_mut().zip(gin_b.data()) {
        *a += *b;
    }
    let g_pre3 = relu_backward(&cache.pre3, &g_act3)?;
    let (g_act2, gk3, gb3) = conv3d_backward(&cache.act2, &params.conv3, &g_pre3)?;
    let g_pre2 = relu_backward(&cache.pre2, &g_act2)?;
    let (g_act1, gk2, gb2) = conv3d_backward(&cache.act1, &params.conv2, &g_pre2)?;
    let g_pre1 = relu_backward(&cache.pre1, &g_act1)?;
    let (_, gk1, gb1) = conv3d_backward(&cache.input, &params.conv1, &g_pre1)?;
    Ok(ParamGrads {
        conv1_kernel: gk1,
        conv1_bias: gb1,
        conv2_kernel: gk2,
        conv2_bias: gb2,
        conv3_kernel: gk3,
        conv3_bias: gb3,
        deconv4a_kernel: gk4a,
        deconv4a_bias: gb4a,
        deconv4b_kernel: gk4b,
        deconv4b_bias: gb4b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::GridSpec;

    fn grid_64x64x16() -> VoxelGrid {
        let spec = GridSpec::new([0.0, -12.8, -2.0], 0.4, [64, 64, 16]).unwrap();
        VoxelGrid {
            data: Tensor::zeros(&[1, 64, 64, 16]),
            spec,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = NetworkParams::init(42, &ArchConfig::default()).unwrap();
        let b = NetworkParams::init(42, &ArchConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = NetworkParams::init(43, &ArchConfig::default()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_biases_are_zero() {
        let p = NetworkParams::init(1, &ArchConfig::default()).unwrap();
        assert!(p.conv1.bias.data().iter().all(|&v| v == 0.0));
        assert!(p.deconv4b.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_variance_matches_xavier() {
        // conv2 kernel has 16*32*125 = 64000 draws, enough for a 20% check
        let p = NetworkParams::init(7, &ArchConfig::default()).unwrap();
        let data = p.conv2.kernel.data();
        assert!(data.len() >= 10_000);
        let mean: f64 = data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64;
        let var: f64 =
            data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / data.len() as f64;
        let fan_in = 16 * 125;
        let fan_out = 32 * 125;
        let expect = 2.0 / (fan_in + fan_out) as f64;
        assert!(
            (var - expect).abs() < 0.2 * expect,
            "var {var}, expected {expect}"
        );
    }

    #[test]
    fn forward_shapes_match_input_resolution() {
        let grid = grid_64x64x16();
        let params = NetworkParams::init(0, &ArchConfig::default()).unwrap();
        let (maps, _) = forward(&grid, &params).unwrap();
        assert_eq!(maps.objectness.shape(), &[2, 64, 64, 16]);
        assert_eq!(maps.boxmap.shape(), &[24, 64, 64, 16]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_outputs() {
        let grid = grid_64x64x16();
        let params = NetworkParams::init(3, &ArchConfig::default()).unwrap();
        let (maps, _) = forward(&grid, &params).unwrap();
        assert!(maps.objectness.data().iter().all(|&v| v == 0.0));
        assert!(maps.boxmap.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_dims_are_rejected() {
        // GridSpec can't even be built with dims not divisible by 8
        assert!(GridSpec::new([0.0; 3], 0.4, [60, 64, 16]).is_err());
    }

    #[test]
    fn interior_translation_covariance_by_one_downsample_period() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let spec = GridSpec::new([0.0, 0.0, 0.0], 0.4, [64, 16, 16]).unwrap();
        let mut base = Tensor::zeros(&[1, 64, 16, 16]);
        // random occupancy confined to the interior so an 8-cell shift wraps nothing in
        for i in 16..40 {
            for j in 4..12 {
                for k in 4..12 {
                    if rng.gen_bool(0.35) {
                        base.data_mut()[(i * 16 + j) * 16 + k] = 1.0;
                    }
                }
            }
        }
        let mut shifted = Tensor::zeros(&[1, 64, 16, 16]);
        for i in 0..56 {
            for j in 0..16 {
                for k in 0..16 {
                    let v = base.data()[(i * 16 + j) * 16 + k];
                    shifted.data_mut()[((i + DOWNSAMPLE) * 16 + j) * 16 + k] = v;
                }
            }
        }
        let params = NetworkParams::init(5, &ArchConfig::default()).unwrap();
        let g0 = VoxelGrid { data: base, spec: spec.clone() };
        let g1 = VoxelGrid { data: shifted, spec };
        let (m0, _) = forward(&g0, &params).unwrap();
        let (m1, _) = forward(&g1, &params).unwrap();
        // compare away from boundary-affected margins (receptive field is 21 cells)
        for (t0, t1) in [(&m0.objectness, &m1.objectness), (&m0.boxmap, &m1.boxmap)] {
            let ch = t0.shape()[0];
            for c in 0..ch {
                for i in 24..40 {
                    for j in 0..16 {
                        for k in 0..16 {
                            let a = t0.data()[t0.idx4(c, i, j, k)];
                            let b = t1.data()[t1.idx4(c, i + DOWNSAMPLE, j, k)];
                            assert_eq!(a, b, "c={c} i={i} j={j} k={k}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn backward_zero_head_grads_give_zero_param_grads() {
        let grid = grid_64x64x16();
        let params = NetworkParams::init(9, &ArchConfig::default()).unwrap();
        let (maps, cache) = forward(&grid, &params).unwrap();
        let ga = Tensor::zeros(maps.objectness.shape());
        let gb = Tensor::zeros(maps.boxmap.shape());
        let grads = backward(&params, &cache, &ga, &gb).unwrap();
        for t in grads.tensors() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }
}
