//! Checkpoint format: magic "V3DFCN\0", little-endian u32 version, one ASCII
//! header line of comma-separated architecture extents
//! (in,out,kernel,stride,pad for each conv; in,out,kernel for each deconv),
//! then raw little-endian f32 arrays in fixed layer order
//! (conv1 kernel, conv1 bias, ..., deconv4b kernel, deconv4b bias).

use std::fs;
use std::path::Path;

use crate::tensor_nn::{ConvLayer, DeconvLayer, Tensor};

use super::{Fcn3dError, NetworkParams, BOXMAP_CHANNELS, DOWNSAMPLE, OBJECTNESS_CHANNELS};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"V3DFCN\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(params: &NetworkParams, path: &Path) -> Result<(), Fcn3dError> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());

    let convs = [&params.conv1, &params.conv2, &params.conv3];
    let deconvs = [&params.deconv4a, &params.deconv4b];
    let mut fields: Vec<String> = Vec::new();
    for c in convs {
        for v in [c.in_channels(), c.out_channels(), c.kernel_size(), c.stride, c.padding] {
            fields.push(v.to_string());
        }
    }
    for d in deconvs {
        for v in [d.in_channels(), d.out_channels(), d.stride] {
            fields.push(v.to_string());
        }
    }
    bytes.extend_from_slice(fields.join(",").as_bytes());
    bytes.push(b'\n');

    for t in params.tensors() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Fcn3dError::Checkpoint(format!("write {}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkParams, Fcn3dError> {
    let bytes = fs::read(path)
        .map_err(|e| Fcn3dError::Checkpoint(format!("read {}: {e}", path.display())))?;
    let err = |reason: &str| Fcn3dError::Checkpoint(format!("{}: {reason}", path.display()));

    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 || &bytes[..7] != CHECKPOINT_MAGIC {
        return Err(err("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[7..11].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(err(&format!("unsupported version {version}")));
    }
    let header_end = bytes[11..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| err("missing header line"))?
        + 11;
    let header = std::str::from_utf8(&bytes[11..header_end]).map_err(|_| err("non-ascii header"))?;
    let nums: Vec<usize> = header
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| err("non-numeric header field"))?;
    if nums.len() != 3 * 5 + 2 * 3 {
        return Err(err(&format!("header has {} fields, expected 21", nums.len())));
    }

    let mut cursor = header_end + 1;
    let mut take = |n: usize| -> Result<Vec<f32>, Fcn3dError> {
        let need = n * 4;
        if cursor + need > bytes.len() {
            return Err(err("truncated parameter data"));
        }
        let vals = bytes[cursor..cursor + need]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        cursor += need;
        Ok(vals)
    };

    let mut convs: Vec<ConvLayer> = Vec::with_capacity(3);
    for i in 0..3 {
        let [ci, co, k, s, p] = [nums[5 * i], nums[5 * i + 1], nums[5 * i + 2], nums[5 * i + 3], nums[5 * i + 4]];
        let kernel = Tensor::from_vec(vec![co, ci, k, k, k], take(co * ci * k * k * k)?)
            .map_err(|e| err(&e.to_string()))?;
        let bias = Tensor::from_vec(vec![co], take(co)?).map_err(|e| err(&e.to_string()))?;
        convs.push(ConvLayer::new(kernel, bias, s, p).map_err(|e| err(&e.to_string()))?);
    }
    let mut deconvs: Vec<DeconvLayer> = Vec::with_capacity(2);
    for i in 0..2 {
        let [ci, co, s] = [nums[15 + 3 * i], nums[15 + 3 * i + 1], nums[15 + 3 * i + 2]];
        let kernel = Tensor::from_vec(vec![ci, co, s, s, s], take(ci * co * s * s * s)?)
            .map_err(|e| err(&e.to_string()))?;
        let bias = Tensor::from_vec(vec![co], take(co)?).map_err(|e| err(&e.to_string()))?;
        deconvs.push(DeconvLayer::new(kernel, bias, s).map_err(|e| err(&e.to_string()))?);
    }
    if cursor != bytes.len() {
        return Err(err("trailing bytes after parameter data"));
    }

    let deconv4b = deconvs.pop().unwrap();
    let deconv4a = deconvs.pop().unwrap();
    if deconv4a.out_channels() != OBJECTNESS_CHANNELS
        || deconv4b.out_channels() != BOXMAP_CHANNELS
        || deconv4a.stride != DOWNSAMPLE
        || deconv4b.stride != DOWNSAMPLE
    {
        return Err(err("head layers do not match the dual-map architecture"));
    }
    let conv3 = convs.pop().unwrap();
    let conv2 = convs.pop().unwrap();
    let conv1 = convs.pop().unwrap();
    Ok(NetworkParams {
        conv1,
        conv2,
        conv3,
        deconv4a,
        deconv4b,
    })
}
