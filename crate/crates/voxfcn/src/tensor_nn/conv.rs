//! Direct 3D convolution (cross-correlation, no kernel flip) with exact
//! hand-derived gradients.
//!
//! Inner loops walk one output row at a time with the kernel taps of the last
//! axis fused into a single windowed pass; rows whose window leaves the input
//! fall back to per-tap bounds checks. Accumulation is f64 throughout.

use super::{dim_err, for_each_chunk, for_each_chunk_seq, NnError, Tensor};

/// 3D convolution layer. Kernel layout: `[out_ch, in_ch, k, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    pub fn new(kernel: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self, NnError> {
        if kernel.shape().len() != 5 {
            return Err(NnError::BadLayerConfig(format!(
                "conv kernel must be 5-dimensional, got {:?}",
                kernel.shape()
            )));
        }
        let ks = kernel.shape();
        if ks[2] != ks[3] || ks[2] != ks[4] || ks[2] == 0 {
            return Err(NnError::BadLayerConfig(format!(
                "conv kernel spatial extents must be equal and positive, got {:?}",
                &ks[2..]
            )));
        }
        if ks[0] == 0 || ks[1] == 0 {
            return Err(NnError::BadLayerConfig("conv kernel channels must be positive".into()));
        }
        if stride == 0 {
            return Err(NnError::BadLayerConfig("conv stride must be positive".into()));
        }
        if bias.shape() != [ks[0]] {
            return Err(dim_err("conv bias", ks[0], bias.len()));
        }
        Ok(Self {
            kernel,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[2]
    }
}

/// Output extent along one spatial axis: floor((d + 2p - k) / s) + 1.
/// Errors if the padded input is smaller than the kernel.
fn out_extent(axis: usize, d: usize, k: usize, s: usize, p: usize) -> Result<usize, NnError> {
    let padded = d + 2 * p;
    if padded < k {
        return Err(dim_err(
            &format!("spatial axis {axis} (input {d}, kernel {k}, padding {p})"),
            k,
            padded,
        ));
    }
    Ok((padded - k) / s + 1)
}

/// Output index range `[lo, hi)` along one axis for which the input index
/// `o*s + delta - p` stays inside `[0, d_in)`.
fn valid_range(d_in: usize, d_out: usize, s: usize, p: usize, delta: usize) -> (usize, usize) {
    let lo = if delta >= p { 0 } else { (p - delta).div_ceil(s) };
    let hi_num = d_in as isize - 1 + p as isize - delta as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num as usize / s + 1).min(d_out);
    (lo.min(hi), hi)
}

struct ConvGeom {
    ci: usize,
    co: usize,
    k: usize,
    s: usize,
    p: usize,
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    // valid output ranges per kernel offset, axes 0 and 1
    r0: Vec<(usize, usize)>,
    r1: Vec<(usize, usize)>,
    // output columns whose full fused window lies inside the input row
    safe: (usize, usize),
}

impl ConvGeom {
    fn resolve(input: &Tensor, layer: &ConvLayer) -> Result<Self, NnError> {
        if input.shape().len() != 4 {
            return Err(NnError::BadLayerConfig(format!(
                "conv input must be 4-dimensional (channels + 3 spatial), got {:?}",
                input.shape()
            )));
        }
        let ci = layer.in_channels();
        if input.shape()[0] != ci {
            return Err(dim_err("input channels", ci, input.shape()[0]));
        }
        let k = layer.kernel_size();
        let (s, p) = (layer.stride, layer.padding);
        let in_dims = [input.shape()[1], input.shape()[2], input.shape()[3]];
        let out_dims = [
            out_extent(0, in_dims[0], k, s, p)?,
            out_extent(1, in_dims[1], k, s, p)?,
            out_extent(2, in_dims[2], k, s, p)?,
        ];
        let range_for = |axis: usize| {
            (0..k)
                .map(|delta| valid_range(in_dims[axis], out_dims[axis], s, p, delta))
                .collect::<Vec<_>>()
        };
        let safe_lo = p.div_ceil(s).min(out_dims[2]);
        let safe_hi = if in_dims[2] + p >= k {
            (((in_dims[2] + p - k) / s) + 1).clamp(safe_lo, out_dims[2])
        } else {
            safe_lo
        };
        Ok(Self {
            ci,
            co: layer.out_channels(),
            k,
            s,
            p,
            in_dims,
            out_dims,
            r0: range_for(0),
            r1: range_for(1),
            safe: (safe_lo, safe_hi),
        })
    }

    fn in_spatial(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn out_spatial(&self) -> usize {
        self.out_dims.iter().product()
    }
}

/// acc_row[ow] += sum_j taps[j] * in_row[ow*s + j - p] over valid taps.
#[inline]
fn row_forward(
    acc_row: &mut [f64],
    in_row: &[f32],
    taps: &[f64],
    s: usize,
    p: usize,
    safe: (usize, usize),
) {
    let (safe_lo, safe_hi) = safe;
    let d2 = in_row.len() as isize;
    let edge = |acc_row: &mut [f64], range: std::ops::Range<usize>| {
        for ow in range {
            let base = (ow * s) as isize - p as isize;
            let mut sum = 0.0;
            for (j, &kv) in taps.iter().enumerate() {
                let iw = base + j as isize;
                if iw >= 0 && iw < d2 {
                    sum += kv * in_row[iw as usize] as f64;
                }
            }
            acc_row[ow] += sum;
        }
    };
    edge(acc_row, 0..safe_lo);
    for ow in safe_lo..safe_hi {
        let base = ow * s - p;
        let mut sum = 0.0;
        for (&kv, &x) in taps.iter().zip(&in_row[base..base + taps.len()]) {
            sum += kv * x as f64;
        }
        acc_row[ow] += sum;
    }
    edge(acc_row, safe_hi..acc_row.len());
}

fn forward_channel(
    o: usize,
    out_chunk: &mut [f32],
    input: &[f32],
    kernel: &[f32],
    bias: f32,
    g: &ConvGeom,
) {
    let [_, d1, d2] = g.in_dims;
    let [_, o1, o2] = g.out_dims;
    let (k, s, p) = (g.k, g.s, g.p);
    let k3 = k * k * k;
    let in_sp = g.in_spatial();
    let mut acc = vec![bias as f64; g.out_spatial()];
    let mut taps = vec![0.0f64; k];
    for i in 0..g.ci {
        let ich = &input[i * in_sp..(i + 1) * in_sp];
        for dd in 0..k {
            let (lo0, hi0) = g.r0[dd];
            for dh in 0..k {
                let (lo1, hi1) = g.r1[dh];
                if lo0 >= hi0 || lo1 >= hi1 {
                    continue;
                }
                let kbase = (o * g.ci + i) * k3 + (dd * k + dh) * k;
                for (t, &kv) in taps.iter_mut().zip(&kernel[kbase..kbase + k]) {
                    *t = kv as f64;
                }
                for od in lo0..hi0 {
                    let id = od * s + dd - p;
                    for oh in lo1..hi1 {
                        let ih = oh * s + dh - p;
                        let in_row = &ich[(id * d1 + ih) * d2..][..d2];
                        let acc_row = &mut acc[(od * o1 + oh) * o2..][..o2];
                        row_forward(acc_row, in_row, &taps, s, p, g.safe);
                    }
                }
            }
        }
    }
    for (dst, v) in out_chunk.iter_mut().zip(acc.iter()) {
        *dst = *v as f32;
    }
}

/// Cross-correlation: `out[o, q] = bias[o] + sum_{i, d} kernel[o, i, d] * in[i, s*q + d - p]`.
pub fn conv3d_forward(input: &Tensor, layer: &ConvLayer) -> Result<Tensor, NnError> {
    let g = ConvGeom::resolve(input, layer)?;
    let mut out = Tensor::zeros(&[g.co, g.out_dims[0], g.out_dims[1], g.out_dims[2]]);
    let sp = g.out_spatial();
    for_each_chunk(out.data_mut(), sp, |o, chunk| {
        forward_channel(o, chunk, input.data(), layer.kernel.data(), layer.bias.data()[o], &g);
    });
    Ok(out)
}

/// Sequential twin of [`conv3d_forward`]; bit-identical output.
pub fn conv3d_forward_seq(input: &Tensor, layer: &ConvLayer) -> Result<Tensor, NnError> {
    let g = ConvGeom::resolve(input, layer)?;
    let mut out = Tensor::zeros(&[g.co, g.out_dims[0], g.out_dims[1], g.out_dims[2]]);
    let sp = g.out_spatial();
    for_each_chunk_seq(out.data_mut(), sp, |o, chunk| {
        forward_channel(o, chunk, input.data(), layer.kernel.data(), layer.bias.data()[o], &g);
    });
    Ok(out)
}

/// taps[j] += sum_ow grad_row[ow] * in_row[ow*s + j - p] over valid taps.
#[inline]
fn row_grad_kernel(
    taps: &mut [f64],
    grad_row: &[f32],
    in_row: &[f32],
    s: usize,
    p: usize,
    safe: (usize, usize),
) {
    let (safe_lo, safe_hi) = safe;
    let d2 = in_row.len() as isize;
    let edge = |taps: &mut [f64], range: std::ops::Range<usize>| {
        for ow in range {
            let gv = grad_row[ow] as f64;
            let base = (ow * s) as isize - p as isize;
            for (j, t) in taps.iter_mut().enumerate() {
                let iw = base + j as isize;
                if iw >= 0 && iw < d2 {
                    *t += gv * in_row[iw as usize] as f64;
                }
            }
        }
    };
    edge(taps, 0..safe_lo);
    let k = taps.len();
    for ow in safe_lo..safe_hi {
        let gv = grad_row[ow] as f64;
        let base = ow * s - p;
        for (t, &x) in taps.iter_mut().zip(&in_row[base..base + k]) {
            *t += gv * x as f64;
        }
    }
    edge(taps, safe_hi..grad_row.len());
}

fn grad_kernel_channel(
    o: usize,
    gk_chunk: &mut [f32],
    input: &[f32],
    grad_out: &[f32],
    g: &ConvGeom,
) {
    let [_, d1, d2] = g.in_dims;
    let [_, o1, o2] = g.out_dims;
    let (k, s, p) = (g.k, g.s, g.p);
    let in_sp = g.in_spatial();
    let out_sp = g.out_spatial();
    let go = &grad_out[o * out_sp..(o + 1) * out_sp];
    let mut taps = vec![0.0f64; k];
    for i in 0..g.ci {
        let ich = &input[i * in_sp..(i + 1) * in_sp];
        for dd in 0..k {
            let (lo0, hi0) = g.r0[dd];
            for dh in 0..k {
                let (lo1, hi1) = g.r1[dh];
                taps.iter_mut().for_each(|t| *t = 0.0);
                for od in lo0..hi0 {
                    let id = od * s + dd - p;
                    for oh in lo1..hi1 {
                        let ih = oh * s + dh - p;
                        let in_row = &ich[(id * d1 + ih) * d2..][..d2];
                        let grad_row = &go[(od * o1 + oh) * o2..][..o2];
                        row_grad_kernel(&mut taps, grad_row, in_row, s, p, g.safe);
                    }
                }
                let out_base = (i * k + dd) * k * k + dh * k;
                for (dst, &t) in gk_chunk[out_base..out_base + k].iter_mut().zip(taps.iter()) {
                    *dst = t as f32;
                }
            }
        }
    }
}

/// acc_in_row[ow*s + j - p] += taps[j] * grad_row[ow] over valid taps.
#[inline]
fn row_grad_input(
    acc_in_row: &mut [f64],
    grad_row: &[f32],
    taps: &[f64],
    s: usize,
    p: usize,
    safe: (usize, usize),
) {
    let (safe_lo, safe_hi) = safe;
    let d2 = acc_in_row.len() as isize;
    let edge = |acc_in_row: &mut [f64], range: std::ops::Range<usize>| {
        for ow in range {
            let gv = grad_row[ow] as f64;
            let base = (ow * s) as isize - p as isize;
            for (j, &kv) in taps.iter().enumerate() {
                let iw = base + j as isize;
                if iw >= 0 && iw < d2 {
                    acc_in_row[iw as usize] += kv * gv;
                }
            }
        }
    };
    edge(acc_in_row, 0..safe_lo);
    for ow in safe_lo..safe_hi {
        let gv = grad_row[ow] as f64;
        let base = ow * s - p;
        for (dst, &kv) in acc_in_row[base..base + taps.len()].iter_mut().zip(taps) {
            *dst += kv * gv;
        }
    }
    edge(acc_in_row, safe_hi..grad_row.len());
}

fn grad_input_channel(
    i: usize,
    gi_chunk: &mut [f32],
    kernel: &[f32],
    grad_out: &[f32],
    g: &ConvGeom,
) {
    let [_, d1, d2] = g.in_dims;
    let [_, o1, o2] = g.out_dims;
    let (k, s, p) = (g.k, g.s, g.p);
    let k3 = k * k * k;
    let out_sp = g.out_spatial();
    let mut acc = vec![0.0f64; g.in_spatial()];
    let mut taps = vec![0.0f64; k];
    for o in 0..g.co {
        let go = &grad_out[o * out_sp..(o + 1) * out_sp];
        for dd in 0..k {
            let (lo0, hi0) = g.r0[dd];
            for dh in 0..k {
                let (lo1, hi1) = g.r1[dh];
                if lo0 >= hi0 || lo1 >= hi1 {
                    continue;
                }
                let kbase = (o * g.ci + i) * k3 + (dd * k + dh) * k;
                for (t, &kv) in taps.iter_mut().zip(&kernel[kbase..kbase + k]) {
                    *t = kv as f64;
                }
                for od in lo0..hi0 {
                    let id = od * s + dd - p;
                    for oh in lo1..hi1 {
                        let ih = oh * s + dh - p;
                        let acc_row = &mut acc[(id * d1 + ih) * d2..][..d2];
                        let grad_row = &go[(od * o1 + oh) * o2..][..o2];
                        row_grad_input(acc_row, grad_row, &taps, s, p, g.safe);
                    }
                }
            }
        }
    }
    for (dst, v) in gi_chunk.iter_mut().zip(acc.iter()) {
        *dst = *v as f32;
    }
}

fn conv3d_backward_impl(
    input: &Tensor,
    layer: &ConvLayer,
    grad_out: &Tensor,
    parallel: bool,
) -> Result<(Tensor, Tensor, Tensor), NnError> {
    let g = ConvGeom::resolve(input, layer)?;
    let expected = [g.co, g.out_dims[0], g.out_dims[1], g.out_dims[2]];
    if grad_out.shape() != expected {
        return Err(dim_err(
            "grad_out shape",
            expected.iter().product(),
            grad_out.len(),
        ));
    }

    let mut grad_kernel = Tensor::zeros(layer.kernel.shape());
    let k3 = g.k * g.k * g.k;
    let run = |buf: &mut [f32], chunk: usize, f: &(dyn Fn(usize, &mut [f32]) + Sync)| {
        if parallel {
            for_each_chunk(buf, chunk, f);
        } else {
            for_each_chunk_seq(buf, chunk, f);
        }
    };
    run(grad_kernel.data_mut(), g.ci * k3, &|o, chunk: &mut [f32]| {
        grad_kernel_channel(o, chunk, input.data(), grad_out.data(), &g);
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

/// Exact gradients of [`conv3d_forward`] with respect to input, kernel, bias.
pub fn conv3d_backward(
    input: &Tensor,
    layer: &ConvLayer,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), NnError> {
    conv3d_backward_impl(input, layer, grad_out, true)
}

/// Sequential twin of [`conv3d_backward`]; bit-identical output.
pub fn conv3d_backward_seq(
    input: &Tensor,
    layer: &ConvLayer,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), NnError> {
    conv3d_backward_impl(input, layer, grad_out, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(co: usize, ci: usize, k: usize, s: usize, p: usize, kval: f32) -> ConvLayer {
        ConvLayer::new(
            Tensor::full(&[co, ci, k, k, k], kval),
            Tensor::zeros(&[co]),
            s,
            p,
        )
        .unwrap()
    }

    #[test]
    fn identity_kernel_passes_value() {
        let input = Tensor::from_vec(vec![1, 1, 1, 1], vec![3.25]).unwrap();
        let out = conv3d_forward(&input, &layer(1, 1, 1, 1, 0, 1.0)).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data()[0], 3.25);
    }

    #[test]
    fn counting_kernel_sums_ones() {
        let input = Tensor::full(&[1, 4, 4, 4], 1.0);
        let out = conv3d_forward(&input, &layer(1, 1, 2, 2, 0, 1.0)).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2, 2]);
        assert!(out.data().iter().all(|&v| v == 8.0));
    }

    #[test]
    fn floor_division_output_extent() {
        // 64 -> 32 with k=5, s=2, p=2 (floor((64+4-5)/2)+1 = 32)
        let input = Tensor::zeros(&[1, 64, 8, 8]);
        let out = conv3d_forward(&input, &layer(1, 1, 5, 2, 2, 0.5)).unwrap();
        assert_eq!(out.shape(), &[1, 32, 4, 4]);
    }

    #[test]
    fn input_smaller_than_kernel_is_error() {
        let input = Tensor::zeros(&[1, 2, 2, 2]);
        let err = conv3d_forward(&input, &layer(1, 1, 5, 1, 0, 1.0)).unwrap_err();
        assert!(matches!(err, NnError::DimensionMismatch { .. }));
    }

    #[test]
    fn channel_mismatch_is_error() {
        let input = Tensor::zeros(&[2, 4, 4, 4]);
        assert!(conv3d_forward(&input, &layer(1, 1, 3, 1, 1, 1.0)).is_err());
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let input = Tensor::full(&[2, 4, 4, 4], 0.7);
        let l = layer(3, 2, 3, 1, 1, 0.3);
        let go = Tensor::zeros(&[3, 4, 4, 4]);
        let (gi, gk, gb) = conv3d_backward(&input, &l, &go).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gk.data().iter().all(|&v| v == 0.0));
        assert!(gb.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_case_grad_kernel_is_input_times_grad() {
        let input = Tensor::from_vec(vec![1, 1, 1, 1], vec![2.5]).unwrap();
        let l = layer(1, 1, 1, 1, 0, 0.5);
        let go = Tensor::from_vec(vec![1, 1, 1, 1], vec![3.0]).unwrap();
        let (gi, gk, gb) = conv3d_backward(&input, &l, &go).unwrap();
        assert_eq!(gk.data()[0], 7.5); // input * grad_out
        assert_eq!(gi.data()[0], 1.5); // kernel * grad_out
        assert_eq!(gb.data()[0], 3.0);
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let input = Tensor::from_vec(
            vec![2, 6, 5, 7],
            (0..2 * 6 * 5 * 7).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let l = ConvLayer::new(
            Tensor::from_vec(
                vec![3, 2, 3, 3, 3],
                (0..3 * 2 * 27).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap(),
            Tensor::from_vec(vec![3], vec![0.1, -0.2, 0.3]).unwrap(),
            2,
            1,
        )
        .unwrap();
        let a = conv3d_forward(&input, &l).unwrap();
        let b = conv3d_forward_seq(&input, &l).unwrap();
        assert_eq!(a, b);
        let go = Tensor::from_vec(
            a.shape().to_vec(),
            (0..a.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let (gi1, gk1, gb1) = conv3d_backward(&input, &l, &go).unwrap();
        let (gi2, gk2, gb2) = conv3d_backward_seq(&input, &l, &go).unwrap();
        assert_eq!(gi1, gi2);
        assert_eq!(gk1, gk2);
        assert_eq!(gb1, gb2);
    }
}
