//! Square-grid discretization of point clouds and training-target generation
//! (objectness labels plus per-cell corner offsets).

use thiserror::Error;

use crate::io_kitti::{Calibration, ObjectLabel, PointCloud};
use crate::tensor_nn::Tensor;

#[derive(Debug, Error)]
pub enum VoxelError {
    #[error("invalid grid spec: {0}")]
    BadSpec(String),
    #[error("cell index {index:?} out of range for dims {dims:?}")]
    IndexOutOfRange { index: [usize; 3], dims: [usize; 3] },
    #[error("invalid oriented box: {0}")]
    BadBox(String),
}

/// Cell counts must be divisible by this so three stride-2 downsamples
/// followed by one stride-8 upsample reproduce the input resolution exactly.
pub const GRID_DIM_MULTIPLE: usize = 8;

/// Uniform cubic grid over a world-frame axis-aligned region. `origin` is the
/// low corner of cell (0, 0, 0); cells are half-open cubes
/// `[origin + i*s, origin + (i+1)*s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    origin: [f64; 3],
    voxel_size: f64,
    dims: [usize; 3],
}

impl GridSpec {
    pub fn new(origin: [f64; 3], voxel_size: f64, dims: [usize; 3]) -> Result<Self, VoxelError> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(VoxelError::BadSpec(format!(
                "voxel_size must be positive and finite, got {voxel_size}"
            )));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(VoxelError::BadSpec(format!("origin must be finite, got {origin:?}")));
        }
        for (axis, &d) in dims.iter().enumerate() {
            if d == 0 || d % GRID_DIM_MULTIPLE != 0 {
                return Err(VoxelError::BadSpec(format!(
                    "dim {axis} must be a positive multiple of {GRID_DIM_MULTIPLE}, got {d}"
                )));
            }
        }
        Ok(Self {
            origin,
            voxel_size,
            dims,
        })
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn num_cells(&self) -> usize {
        self.dims.iter().product()
    }

    /// Flat index of a cell, last axis fastest (matches tensor layout).
    pub fn flat_index(&self, index: [usize; 3]) -> usize {
        (index[0] * self.dims[1] + index[1]) * self.dims[2] + index[2]
    }

    pub fn unflatten(&self, flat: usize) -> [usize; 3] {
        let k = flat % self.dims[2];
        let rest = flat / self.dims[2];
        [rest / self.dims[1], rest % self.dims[1], k]
    }

    /// Cell containing a world point under the half-open convention, or None
    /// if the point falls outside the grid extent.
    pub fn cell_of(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let rel = (p[a] - self.origin[a]) / self.voxel_size;
            let i = rel.floor();
            if i < 0.0 || i >= self.dims[a] as f64 {
                return None;
            }
            idx[a] = i as usize;
        }
        Some(idx)
    }

    /// World coordinate of a cell center: origin + (index + 0.5) * voxel_size.
    pub fn region_center(&self, index: [usize; 3]) -> Result<[f64; 3], VoxelError> {
        for a in 0..3 {
            if index[a] >= self.dims[a] {
                return Err(VoxelError::IndexOutOfRange {
                    index,
                    dims: self.dims,
                });
            }
        }
        Ok(self.center_unchecked(index))
    }

    pub(crate) fn center_unchecked(&self, index: [usize; 3]) -> [f64; 3] {
        [
            self.origin[0] + (index[0] as f64 + 0.5) * self.voxel_size,
            self.origin[1] + (index[1] as f64 + 0.5) * self.voxel_size,
            self.origin[2] + (index[2] as f64 + 0.5) * self.voxel_size,
        ]
    }
}

/// Binary occupancy grid: one channel of {0, 1} over the grid cells.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub spec: GridSpec,
    /// Shape [1, L, W, H]; values are exactly 0.0 or 1.0.
    pub data: Tensor,
}

impl VoxelGrid {
    pub fn occupied_cells(&self) -> usize {
        self.data.data().iter().filter(|&&v| v != 0.0).count()
    }
}

/// Marks each cell containing at least one point. Points outside the grid
/// extent are dropped; multiple points in a cell still produce 1.
pub fn voxelize(cloud: &PointCloud, spec: &GridSpec) -> VoxelGrid {
    let dims = spec.dims();
    let mut data = Tensor::zeros(&[1, dims[0], dims[1], dims[2]]);
    let buf = data.data_mut();
    for p in &cloud.points {
        if let Some(idx) = spec.cell_of([p.x as f64, p.y as f64, p.z as f64]) {
            buf[spec.flat_index(idx)] = 1.0;
        }
    }
    VoxelGrid {
        spec: spec.clone(),
        data,
    }
}

/// Oriented 3D box: geometric center, (length, width, height) extents, and a
/// yaw about the vertical (z) axis, normalized to (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

pub fn normalize_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a <= -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    } else if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    }
    a
}

impl OrientedBox3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Result<Self, VoxelError> {
        if !size.iter().all(|&v| v > 0.0 && v.is_finite()) {
            return Err(VoxelError::BadBox(format!("size must be positive, got {size:?}")));
        }
        if !center.iter().all(|v| v.is_finite()) || !yaw.is_finite() {
            return Err(VoxelError::BadBox("center and yaw must be finite".into()));
        }
        Ok(Self {
            center,
            size,
            yaw: normalize_angle(yaw),
        })
    }

    pub fn length(&self) -> f64 {
        self.size[0]
    }

    pub fn width(&self) -> f64 {
        self.size[1]
    }

    pub fn height(&self) -> f64 {
        self.size[2]
    }

    /// True when a world point lies inside the box (closed interior).
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let dz = p[2] - self.center[2];
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= self.size[0] * 0.5 && ly.abs() <= self.size[1] * 0.5 && dz.abs() <= self.size[2] * 0.5
    }
}

/// The 8 box corners in a fixed order: corner index bit 0 picks the +length
/// (bit clear) or -length (bit set) half, bit 1 the width half, bit 2 the
/// height half. Local offsets are rotated by yaw about the vertical axis and
/// translated by the center.
pub fn box_corners(b: &OrientedBox3D) -> [[f64; 3]; 8] {
    let (s, c) = b.yaw.sin_cos();
    let h = [b.size[0] * 0.5, b.size[1] * 0.5, b.size[2] * 0.5];
    let mut out = [[0.0; 3]; 8];
    for (i, corner) in out.iter_mut().enumerate() {
        let sx = if i & 1 == 0 { h[0] } else { -h[0] };
        let sy = if i & 2 == 0 { h[1] } else { -h[1] };
        let sz = if i & 4 == 0 { h[2] } else { -h[2] };
        *corner = [
            b.center[0] + c * sx - s * sy,
            b.center[1] + s * sx + c * sy,
            b.center[2] + sz,
        ];
    }
    out
}

/// Per-cell training targets. Labels cover every grid cell; corner offsets are
/// stored per positive cell (24 values in [`box_corners`] order: decoded
/// corner k coordinate a = offsets[3k + a] + region center a).
#[derive(Debug, Clone, PartialEq)]
pub struct TargetVolume {
    dims: [usize; 3],
    labels: Vec<CellLabel>,
    positive_cells: Vec<usize>,
    offsets: Vec<[f32; 24]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum CellLabel {
    Negative = 0,
    Positive = 1,
    Ignore = 2,
}

impl TargetVolume {
    /// Assembles a volume from raw parts; positives must be sorted ascending
    /// and aligned with their offsets.
    pub(crate) fn from_parts(
        dims: [usize; 3],
        labels: Vec<CellLabel>,
        positive_cells: Vec<usize>,
        offsets: Vec<[f32; 24]>,
    ) -> Self {
        debug_assert_eq!(labels.len(), dims.iter().product::<usize>());
        debug_assert_eq!(positive_cells.len(), offsets.len());
        debug_assert!(positive_cells.windows(2).all(|w| w[0] < w[1]));
        Self {
            dims,
            labels,
            positive_cells,
            offsets,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn num_cells(&self) -> usize {
        self.labels.len()
    }

    pub fn label(&self, flat: usize) -> CellLabel {
        self.labels[flat]
    }

    pub fn labels(&self) -> &[CellLabel] {
        &self.labels
    }

    /// Flat indices of the positive set (sorted ascending).
    pub fn positive_cells(&self) -> &[usize] {
        &self.positive_cells
    }

    /// Corner-offset target of the i-th positive cell.
    pub fn offsets(&self) -> &[[f32; 24]] {
        &self.offsets
    }

    pub fn num_positive(&self) -> usize {
        self.positive_cells.len()
    }

    /// Cells in the objectness sum (everything except ignore cells).
    pub fn num_active(&self) -> usize {
        self.labels.iter().filter(|&&l| l != CellLabel::Ignore).count()
    }

    /// Flat indices of negative cells, ascending.
    pub fn negative_cells(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == CellLabel::Negative)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Converts a camera-frame KITTI label into a sensor-frame oriented box.
///
/// The label location is the bottom-face center in (rectified) camera
/// coordinates and rotation_y turns the length axis, whose camera-frame
/// direction is (cos ry, 0, -sin ry). Both are mapped through the calibration
/// so the conversion holds for any rigid sensor-to-camera transform whose
/// vertical axes align.
pub fn label_to_velo_box(label: &ObjectLabel, calib: &Calibration) -> Result<OrientedBox3D, VoxelError> {
    let (h, w, l) = (label.size[0], label.size[1], label.size[2]);
    if !(h > 0.0 && w > 0.0 && l > 0.0) {
        return Err(VoxelError::BadBox(format!(
            "label {:?} has non-positive size {:?}",
            label.class_name, label.size
        )));
    }
    // geometric center: half a height above the bottom face (camera y points down)
    let cam_center = [
        label.location[0],
        label.location[1] - h * 0.5,
        label.location[2],
    ];
    let center = calib.transform_to_velo(cam_center);
    let dir_cam = [label.yaw.cos(), 0.0, -label.yaw.sin()];
    let dir = calib.rotate_to_velo(dir_cam);
    let yaw = dir[1].atan2(dir[0]);
    OrientedBox3D::new(center, [l, w, h], yaw)
}

/// Inverse of [`label_to_velo_box`] for the geometric fields; 2D-box and
/// score-like fields must be filled by the caller.
pub fn velo_box_to_label_pose(b: &OrientedBox3D, calib: &Calibration) -> ([f64; 3], f64) {
    let cam_center = calib.transform_to_cam(b.center);
    let location = [cam_center[0], cam_center[1] + b.height() * 0.5, cam_center[2]];
    let dir_cam = calib.rotate_to_cam([b.yaw.cos(), b.yaw.sin(), 0.0]);
    let ry = (-dir_cam[2]).atan2(dir_cam[0]);
    (location, ry)
}

/// Classes labeled positive / ignore, everything else background.
pub const POSITIVE_CLASS: &str = "Car";
pub const IGNORE_CLASSES: [&str; 2] = ["Van", "Truck"];

/// Builds the per-cell training targets for one scene.
///
/// Cars: cells whose center lies within `sphere_radius_fraction *
/// min(length, width)` of the box center become positive and carry the
/// corner-minus-center offsets. Vans and trucks mark cells as ignore over the
/// union of their box interior and the same center sphere. Positive labels
/// take precedence over ignore; all remaining cells are negative.
pub fn generate_targets(
    labels: &[ObjectLabel],
    calib: &Calibration,
    spec: &GridSpec,
    sphere_radius_fraction: f64,
) -> TargetVolume {
    let dims = spec.dims();
    let n = spec.num_cells();
    let mut cell_labels = vec![CellLabel::Negative; n];
    let mut offsets_by_cell: Vec<(usize, [f32; 24])> = Vec::new();

    let boxes: Vec<(bool, OrientedBox3D)> = labels
        .iter()
        .filter_map(|l| {
            let positive = l.class_name == POSITIVE_CLASS;
            let ignore = IGNORE_CLASSES.contains(&l.class_name.as_str());
            if !positive && !ignore {
                return None;
            }
            label_to_velo_box(l, calib).ok().map(|b| (positive, b))
        })
        .collect();

    // ignore regions first so positives can overwrite them
    for (positive, b) in boxes.iter().filter(|(p, _)| !p) {
        debug_assert!(!positive);
        let radius = sphere_radius_fraction * b.length().min(b.width());
        let reach = radius.max(0.5 * (b.size[0].powi(2) + b.size[1].powi(2) + b.size[2].powi(2)).sqrt());
        for_cells_near(spec, b.center, reach, |idx, center| {
            if b.contains(center) || dist(center, b.center) <= radius {
                cell_labels[spec.flat_index(idx)] = CellLabel::Ignore;
            }
        });
        let _ = dims;
    }

    for (_, b) in boxes.iter().filter(|(p, _)| *p) {
        let radius = sphere_radius_fraction * b.length().min(b.width());
        let corners = box_corners(b);
        for_cells_near(spec, b.center, radius, |idx, center| {
            if dist(center, b.center) <= radius {
                let flat = spec.flat_index(idx);
                cell_labels[flat] = CellLabel::Positive;
                let mut off = [0.0f32; 24];
                for (k, corner) in corners.iter().enumerate() {
                    for a in 0..3 {
                        off[3 * k + a] = (corner[a] - center[a]) as f32;
                    }
                }
                offsets_by_cell.push((flat, off));
            }
        });
    }

    // a cell may sit in two car spheres; keep the last write, deduplicated
    offsets_by_cell.sort_by_key(|(flat, _)| *flat);
    let mut positive_cells = Vec::with_capacity(offsets_by_cell.len());
    let mut offsets = Vec::with_capacity(offsets_by_cell.len());
    for (flat, off) in offsets_by_cell {
        if positive_cells.last() == Some(&flat) {
            *offsets.last_mut().unwrap() = off;
        } else {
            positive_cells.push(flat);
            offsets.push(off);
        }
    }

    TargetVolume {
        dims,
        labels: cell_labels,
        positive_cells,
        offsets,
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Visits every cell whose center could lie within `reach` of `center`.
fn for_cells_near(
    spec: &GridSpec,
    center: [f64; 3],
    reach: f64,
    mut visit: impl FnMut([usize; 3], [f64; 3]),
) {
    let dims = spec.dims();
    let s = spec.voxel_size();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let rel_lo = (center[a] - reach - spec.origin()[a]) / s - 0.5;
        let rel_hi = (center[a] + reach - spec.origin()[a]) / s - 0.5;
        if rel_hi < 0.0 || rel_lo >= dims[a] as f64 {
            return;
        }
        lo[a] = rel_lo.floor().max(0.0) as usize;
        hi[a] = (rel_hi.ceil() as usize + 1).min(dims[a]);
    }
    for i in lo[0]..hi[0] {
        for j in lo[1]..hi[1] {
            for k in lo[2]..hi[2] {
                let idx = [i, j, k];
                visit(idx, spec.center_unchecked(idx));
            }
        }
    }
}
