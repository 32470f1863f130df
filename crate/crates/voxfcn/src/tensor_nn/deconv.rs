//! Tile transposed convolution: kernel size equals stride, so every output
//! position is written by exactly one input cell and the upsampled extents are
//! exact multiples of the input extents.

use super::{dim_err, for_each_chunk, for_each_chunk_seq, NnError, Tensor};

/// 3D transposed convolution layer. Kernel layout: `[in_ch, out_ch, k, k, k]`
/// with `k == stride`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeconvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl DeconvLayer {
    pub fn new(kernel: Tensor, bias: Tensor, stride: usize) -> Result<Self, NnError> {
        if kernel.shape().len() != 5 {
            return Err(NnError::BadLayerConfig(format!(
                "deconv kernel must be 5-dimensional, got {:?}",
                kernel.shape()
            )));
        }
        let ks = kernel.shape();
        if ks[2] != stride || ks[3] != stride || ks[4] != stride {
            return Err(NnError::BadLayerConfig(format!(
                "deconv kernel extent must equal its stride {stride}, got {:?}",
                &ks[2..]
            )));
        }
        if stride == 0 || ks[0] == 0 || ks[1] == 0 {
            return Err(NnError::BadLayerConfig(
                "deconv stride and channels must be positive".into(),
            ));
        }
        if bias.shape() != [ks[1]] {
            return Err(dim_err("deconv bias", ks[1], bias.len()));
        }
        Ok(Self { kernel, bias, stride })
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[1]
    }
}

struct DeconvGeom {
    ci: usize,
    co: usize,
    s: usize,
    in_dims: [usize; 3],
    out_dims: [usize; 3],
}

impl DeconvGeom {
    fn resolve(input: &Tensor, layer: &DeconvLayer) -> Result<Self, NnError> {
        if input.shape().len() != 4 {
            return Err(NnError::BadLayerConfig(format!(
                "deconv input must be 4-dimensional, got {:?}",
                input.shape()
            )));
        }
        let ci = layer.in_channels();
        if input.shape()[0] != ci {
            return Err(dim_err("input channels", ci, input.shape()[0]));
        }
        let s = layer.stride;
        let in_dims = [input.shape()[1], input.shape()[2], input.shape()[3]];
        Ok(Self {
            ci,
            co: layer.out_channels(),
            s,
            in_dims,
            out_dims: [in_dims[0] * s, in_dims[1] * s, in_dims[2] * s],
        })
    }

    fn in_spatial(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn out_spatial(&self) -> usize {
        self.out_dims.iter().product()
    }
}

fn forward_channel(
    o: usize,
    out_chunk: &mut [f32],
    input: &[f32],
    kernel: &[f32],
    bias: f32,
    g: &DeconvGeom,
) {
    let [_, d1, d2] = g.in_dims;
    let [q0, q1, q2] = g.out_dims;
    let s = g.s;
    let s3 = s * s * s;
    let in_sp = g.in_spatial();
    // one output row at a time keeps the accumulator in cache
    let mut row = vec![0.0f64; q2];
    for od in 0..q0 {
        let (pd, dd) = (od / s, od % s);
        for oh in 0..q1 {
            let (ph, dh) = (oh / s, oh % s);
            row.iter_mut().for_each(|v| *v = bias as f64);
            let krow_off = (dd * s + dh) * s;
            for i in 0..g.ci {
                let irow = &input[i * in_sp + (pd * d1 + ph) * d2..][..d2];
                let krow = &kernel[(i * g.co + o) * s3 + krow_off..][..s];
                for (pw, &x) in irow.iter().enumerate() {
                    let v = x as f64;
                    for (a, &kw) in row[pw * s..pw * s + s].iter_mut().zip(krow) {
                        *a += v * kw as f64;
                    }
                }
            }
            let out_row = &mut out_chunk[(od * q1 + oh) * q2..][..q2];
            for (dst, &v) in out_row.iter_mut().zip(row.iter()) {
                *dst = v as f32;
            }
        }
    }
}

/// Transposed convolution over non-overlapping tiles:
/// `out[o, s*q + d] = bias[o] + sum_i kernel[i, o, d] * in[i, q]`.
pub fn deconv3d_forward(input: &Tensor, layer: &DeconvLayer) -> Result<Tensor, NnError> {
    let g = DeconvGeom::resolve(input, layer)?;
    let mut out = Tensor::zeros(&[g.co, g.out_dims[0], g.out_dims[1], g.out_dims[2]]);
    let sp = g.out_spatial();
    for_each_chunk(out.data_mut(), sp, |o, chunk| {
        forward_channel(o, chunk, input.data(), layer.kernel.data(), layer.bias.data()[o], &g);
    });
    Ok(out)
}

/// Sequential twin of [`deconv3d_forward`]; bit-identical output.
pub fn deconv3d_forward_seq(input: &Tensor, layer: &DeconvLayer) -> Result<Tensor, NnError> {
    let g = DeconvGeom::resolve(input, layer)?;
    let mut out = Tensor::zeros(&[g.co, g.out_dims[0], g.out_dims[1], g.out_dims[2]]);
    let sp = g.out_spatial();
    for_each_chunk_seq(out.data_mut(), sp, |o, chunk| {
        forward_channel(o, chunk, input.data(), layer.kernel.data(), layer.bias.data()[o], &g);
    });
    Ok(out)
}

fn grad_kernel_in_channel(
    i: usize,
    gk_chunk: &mut [f32],
    input: &[f32],
    grad_out: &[f32],
    g: &DeconvGeom,
) {
    let [_, d1, d2] = g.in_dims;
    let [q0, q1, q2] = g.out_dims;
    let s = g.s;
    let s3 = s * s * s;
    let in_sp = g.in_spatial();
    let out_sp = g.out_spatial();
    let ich = &input[i * in_sp..(i + 1) * in_sp];
    let mut acc = vec![0.0f64; g.co * s3];
    for o in 0..g.co {
        let go = &grad_out[o * out_sp..(o + 1) * out_sp];
        let abase = o * s3;
        for od in 0..q0 {
            let (pd, dd) = (od / s, od % s);
            for oh in 0..q1 {
                let (ph, dh) = (oh / s, oh % s);
                let irow = &ich[(pd * d1 + ph) * d2..][..d2];
                let grow = &go[(od * q1 + oh) * q2..][..q2];
                let arow = &mut acc[abase + (dd * s + dh) * s..][..s];
                for (pw, &x) in irow.iter().enumerate() {
                    let v = x as f64;
                    for (a, &gv) in arow.iter_mut().zip(&grow[pw * s..pw * s + s]) {
                        *a += v * gv as f64;
                    }
                }
            }
        }
    }
    for (dst, v) in gk_chunk.iter_mut().zip(acc.iter()) {
        *dst = *v as f32;
    }
}

fn grad_input_channel(
    i: usize,
    gi_chunk: &mut [f32],
    kernel: &[f32],
    grad_out: &[f32],
    g: &DeconvGeom,
) {
    let [_, d1, d2] = g.in_dims;
    let [q0, q1, q2] = g.out_dims;
    let s = g.s;
    let s3 = s * s * s;
    let out_sp = g.out_spatial();
    let mut acc = vec![0.0f64; g.in_spatial()];
    for o in 0..g.co {
        let go = &grad_out[o * out_sp..(o + 1) * out_sp];
        let kbase = (i * g.co + o) * s3;
        for od in 0..q0 {
            let (pd, dd) = (od / s, od % s);
            for oh in 0..q1 {
                let (ph, dh) = (oh / s, oh % s);
                let arow = &mut acc[(pd * d1 + ph) * d2..][..d2];
                let krow = &kernel[kbase + (dd * s + dh) * s..][..s];
                let grow = &go[(od * q1 + oh) * q2..][..q2];
                for (pw, a) in arow.iter_mut().enumerate() {
                    let mut dot = 0.0f64;
                    for (&kw, &gv) in krow.iter().zip(&grow[pw * s..pw * s + s]) {
                        dot += kw as f64 * gv as f64;
                    }
                    *a += dot;
                }
            }
        }
    }
    for (dst, v) in gi_chunk.iter_mut().zip(acc.iter()) {
        *dst = *v as f32;
    }
}

fn deconv3d_backward_impl(
    input: &Tensor,
    layer: &DeconvLayer,
    grad_out: &Tensor,
    parallel: bool,
) -> Result<(Tensor, Tensor, Tensor), NnError> {
    let g = DeconvGeom::resolve(input, layer)?;
    let expected = [g.co, g.out_dims[0], g.out_dims[1], g.out_dims[2]];
    if grad_out.shape() != expected {
        return Err(dim_err(
            "grad_out shape",
            expected.iter().product(),
            grad_out.len(),
        ));
    }
    let s3 = g.s * g.s * g.s;
    let run = |buf: &mut [f32], chunk: usize, f: &(dyn Fn(usize, &mut [f32]) + Sync)| {
        if parallel {
            for_each_chunk(buf, chunk, f);
        } else {
            for_each_chunk_seq(buf, chunk, f);
        }
    };

    let mut grad_kernel = Tensor::zeros(layer.kernel.shape());
    run(grad_kernel.data_mut(), g.co * s3, &|i, chunk: &mut [f32]| {
        grad_kernel_in_channel(i, chunk, input.data(), grad_out.data(), &g);
    });

    let mut grad_input = Tensor::zeros(input.shape());
    run(grad_input.data_mut(), g.in_spatial(), &|i, chunk: &mut [f32]| {
        grad_input_channel(i, chunk, layer.kernel.data(), grad_out.data(), &g);
    });

    let out_sp = g.out_spatial();
    let mut grad_bias = Tensor::zeros(&[g.co]);
    for o in 0..g.co {
        let sum: f64 = grad_out.data()[o * out_sp..(o + 1) * out_sp]
            .iter()
            .map(|&v| v as f64)
            .sum();
        grad_bias.data_mut()[o] = sum as f32;
    }

    Ok((grad_input, grad_kernel, grad_bias))
}

/// Exact gradients of [`deconv3d_forward`] with respect to input, kernel, bias.
pub fn deconv3d_backward(
    input: &Tensor,
    layer: &DeconvLayer,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), NnError> {
    deconv3d_backward_impl(input, layer, grad_out, true)
}

/// Sequential twin of [`deconv3d_backward`]; bit-identical output.
pub fn deconv3d_backward_seq(
    input: &Tensor,
    layer: &DeconvLayer,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), NnError> {
    deconv3d_backward_impl(input, layer, grad_out, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_size_must_equal_stride() {
        let kernel = Tensor::zeros(&[1, 1, 2, 2, 2]);
        let bias = Tensor::zeros(&[1]);
        assert!(DeconvLayer::new(kernel.clone(), bias.clone(), 3).is_err());
        assert!(DeconvLayer::new(kernel, bias, 2).is_ok());
    }

    #[test]
    fn broadcast_tile_from_single_cell() {
        let input = Tensor::from_vec(vec![1, 1, 1, 1], vec![4.5]).unwrap();
        let layer = DeconvLayer::new(
            Tensor::full(&[1, 1, 2, 2, 2], 1.0),
            Tensor::zeros(&[1]),
            2,
        )
        .unwrap();
        let out = deconv3d_forward(&input, &layer).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2, 2]);
        assert!(out.data().iter().all(|&v| v == 4.5));
    }

    #[test]
    fn zero_input_broadcasts_bias() {
        let input = Tensor::zeros(&[2, 3, 3, 3]);
        let layer = DeconvLayer::new(
            Tensor::full(&[2, 3, 2, 2, 2], 0.7),
            Tensor::from_vec(vec![3], vec![0.5, -1.0, 2.0]).unwrap(),
            2,
        )
        .unwrap();
        let out = deconv3d_forward(&input, &layer).unwrap();
        assert_eq!(out.shape(), &[3, 6, 6, 6]);
        for o in 0..3 {
            let expect = layer.bias.data()[o];
            assert!(out.data()[o * 216..(o + 1) * 216].iter().all(|&v| v == expect));
        }
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let input = Tensor::full(&[2, 2, 2, 2], 1.0);
        let layer = DeconvLayer::new(
            Tensor::full(&[2, 3, 2, 2, 2], 0.5),
            Tensor::zeros(&[3]),
            2,
        )
        .unwrap();
        let go = Tensor::zeros(&[3, 4, 4, 4]);
        let (gi, gk, gb) = deconv3d_backward(&input, &layer, &go).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gk.data().iter().all(|&v| v == 0.0));
        assert!(gb.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_grad_input_sums_kernel_times_grad_tile() {
        // one input cell, one in/out channel: grad_input = sum_d K[d] * go[d]
        let input = Tensor::from_vec(vec![1, 1, 1, 1], vec![9.0]).unwrap();
        let kvals: Vec<f32> = (0..8).map(|v| v as f32 * 0.1).collect();
        let layer = DeconvLayer::new(
            Tensor::from_vec(vec![1, 1, 2, 2, 2], kvals.clone()).unwrap(),
            Tensor::zeros(&[1]),
            2,
        )
        .unwrap();
        let gvals: Vec<f32> = (0..8).map(|v| (v + 1) as f32).collect();
        let go = Tensor::from_vec(vec![1, 2, 2, 2], gvals.clone()).unwrap();
        let (gi, gk, _) = deconv3d_backward(&input, &layer, &go).unwrap();
        let expect: f64 = kvals
            .iter()
            .zip(&gvals)
            .map(|(&k, &g)| k as f64 * g as f64)
            .sum();
        assert!((gi.data()[0] as f64 - expect).abs() < 1e-5);
        for d in 0..8 {
            assert!((gk.data()[d] - 9.0 * gvals[d]).abs() < 1e-5);
        }
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let input = Tensor::from_vec(
            vec![3, 2, 3, 2],
            (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let layer = DeconvLayer::new(
            Tensor::from_vec(
                vec![3, 4, 2, 2, 2],
                (0..96).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap(),
            Tensor::from_vec(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
            2,
        )
        .unwrap();
        let a = deconv3d_forward(&input, &layer).unwrap();
        let b = deconv3d_forward_seq(&input, &layer).unwrap();
        assert_eq!(a, b);
        let go = Tensor::from_vec(
            a.shape().to_vec(),
            (0..a.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let ga = deconv3d_backward(&input, &layer, &go).unwrap();
        let gb = deconv3d_backward_seq(&input, &layer, &go).unwrap();
        assert_eq!(ga, gb);
    }
}
