//! Deterministic synthetic lidar scenes: car-sized boxes with surface points
//! on the faces visible from the sensor, a noisy ground plane, and clutter
//! blobs. Scenes are written in the exact KITTI trio format so the synthetic
//! and real-data pipelines are byte-compatible.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::eval::{ground_plane_polygon, iou_rotated};
use crate::io_kitti::{
    project_points, Calibration, LidarPoint, ObjectLabel, PointCloud,
};
use crate::voxel::{box_corners, velo_box_to_label_pose, OrientedBox3D};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible scene spec: could not place vehicle {vehicle} after {attempts} attempts")]
    Infeasible { vehicle: usize, attempts: usize },
    #[error("bad scene spec: {0}")]
    BadSpec(String),
}

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;
/// Extra clearance between vehicle footprints so suppression and matching see
/// cleanly separated objects.
const FOOTPRINT_MARGIN_M: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    /// Inclusive range of vehicles per scene.
    pub vehicles: (usize, usize),
    /// Placement ranges for box centers, chosen so whole boxes stay inside
    /// the voxel grid extent.
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub length_range: (f64, f64),
    pub width_range: (f64, f64),
    pub height_range: (f64, f64),
    pub yaw_range: (f64, f64),
    /// Surface sampling density on visible faces and the ground.
    pub points_per_m2: f64,
    pub ground_z: f64,
    pub ground_noise_sigma: f64,
    pub clutter_count: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            vehicles: (1, 3),
            x_range: (3.0, 22.5),
            y_range: (-10.0, 10.0),
            length_range: (3.5, 4.5),
            width_range: (1.6, 1.9),
            height_range: (1.4, 1.7),
            yaw_range: (-std::f64::consts::PI, std::f64::consts::PI),
            points_per_m2: 24.0,
            ground_z: -1.7,
            ground_noise_sigma: 0.02,
            clutter_count: 6,
            seed: 0,
        }
    }
}

/// The fixed synthetic pinhole: standard lidar-to-camera axis permutation
/// (x_cam = -y, y_cam = -z, z_cam = x) with no offset, 600px focal length.
pub fn synthetic_calibration() -> Calibration {
    Calibration {
        velo_to_cam: [
            [0.0, -1.0, 0.0, 0.0],
            [0.0, 0.0, -1.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ],
        cam_projection: [
            [600.0, 0.0, 621.0, 0.0],
            [0.0, 600.0, 187.5, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ],
        image_size: (1242, 375),
    }
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi <= lo {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Box faces: center, two in-plane axes with half extents, outward normal.
struct Face {
    center: [f64; 3],
    u: [f64; 3],
    v: [f64; 3],
    half_u: f64,
    half_v: f64,
    normal: [f64; 3],
}

fn faces_of(b: &OrientedBox3D) -> Vec<Face> {
    let (s, c) = b.yaw.sin_cos();
    let ax_l = [c, s, 0.0];
    let ax_w = [-s, c, 0.0];
    let ax_h = [0.0, 0.0, 1.0];
    let half = [b.size[0] * 0.5, b.size[1] * 0.5, b.size[2] * 0.5];
    let mut faces = Vec::with_capacity(6);
    let axes = [(ax_l, half[0]), (ax_w, half[1]), (ax_h, half[2])];
    for (i, (normal_axis, half_n)) in axes.iter().enumerate() {
        let (u_axis, half_u) = axes[(i + 1) % 3];
        let (v_axis, half_v) = axes[(i + 2) % 3];
        for sign in [1.0, -1.0] {
            let normal = normal_axis.map(|v| v * sign);
            let center = [
                b.center[0] + normal[0] * half_n,
                b.center[1] + normal[1] * half_n,
                b.center[2] + normal[2] * half_n,
            ];
            faces.push(Face {
                center,
                u: u_axis,
                v: v_axis,
                half_u,
                half_v,
                normal,
            });
        }
    }
    faces
}

fn face_visible_from_origin(f: &Face) -> bool {
    f.normal[0] * f.center[0] + f.normal[1] * f.center[1] + f.normal[2] * f.center[2] < 0.0
}

fn push_point(points: &mut Vec<LidarPoint>, p: [f64; 3]) {
    points.push(LidarPoint {
        x: p[0] as f32,
        y: p[1] as f32,
        z: p[2] as f32,
        intensity: 0.0,
    });
}

/// Generates one deterministic scene: point cloud, exact labels, calibration.
pub fn generate_scene(spec: &SceneSpec) -> Result<(PointCloud, Vec<ObjectLabel>, Calibration), SynthError> {
    if spec.vehicles.1 < spec.vehicles.0 {
        return Err(SynthError::BadSpec(format!(
            "vehicle range {:?} is inverted",
            spec.vehicles
        )));
    }
    let calib = synthetic_calibration();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_vehicles = rng.gen_range(spec.vehicles.0..=spec.vehicles.1);

    // rejection-sample non-overlapping poses
    let mut boxes: Vec<OrientedBox3D> = Vec::with_capacity(n_vehicles);
    for vehicle in 0..n_vehicles {
        let mut placed = false;
        for _attempt in 0..MAX_PLACEMENT_ATTEMPTS {
            let size = [
                sample_range(&mut rng, spec.length_range),
                sample_range(&mut rng, spec.width_range),
                sample_range(&mut rng, spec.height_range),
            ];
            let center = [
                sample_range(&mut rng, spec.x_range),
                sample_range(&mut rng, spec.y_range),
                spec.ground_z + size[2] * 0.5,
            ];
            let yaw = sample_range(&mut rng, spec.yaw_range);
            let candidate = OrientedBox3D::new(center, size, yaw)
                .map_err(|e| SynthError::BadSpec(e.to_string()))?;
            let inflated = OrientedBox3D::new(
                center,
                [
                    size[0] + FOOTPRINT_MARGIN_M,
                    size[1] + FOOTPRINT_MARGIN_M,
                    size[2],
                ],
                yaw,
            )
            .unwrap();
            let poly = ground_plane_polygon(&inflated);
            let overlaps = boxes.iter().any(|b| {
                let other = OrientedBox3D::new(
                    b.center,
                    [b.size[0] + FOOTPRINT_MARGIN_M, b.size[1] + FOOTPRINT_MARGIN_M, b.size[2]],
                    b.yaw,
                )
                .unwrap();
                iou_rotated(&poly, &ground_plane_polygon(&other)) > 0.0
            });
            if !overlaps {
                boxes.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SynthError::Infeasible {
                vehicle,
                attempts: MAX_PLACEMENT_ATTEMPTS,
            });
        }
    }

    let mut points: Vec<LidarPoint> = Vec::new();

    // vehicle surfaces: faces visible from the sensor at the origin
    for b in &boxes {
        for face in faces_of(b).iter().filter(|f| face_visible_from_origin(f)) {
            let area = 4.0 * face.half_u * face.half_v;
            let count = (area * spec.points_per_m2).round() as usize;
            for _ in 0..count {
                let du = rng.gen_range(-face.half_u..face.half_u);
                let dv = rng.gen_range(-face.half_v..face.half_v);
                push_point(
                    &mut points,
                    [
                        face.center[0] + face.u[0] * du + face.v[0] * dv,
                        face.center[1] + face.u[1] * du + face.v[1] * dv,
                        face.center[2] + face.u[2] * du + face.v[2] * dv,
                    ],
                );
            }
        }
    }

    // ground plane with Gaussian height noise, padded past the placement area
    let gx = (spec.x_range.0 - 3.0, spec.x_range.1 + 3.0);
    let gy = (spec.y_range.0 - 3.0, spec.y_range.1 + 3.0);
    let ground_area = (gx.1 - gx.0) * (gy.1 - gy.0);
    let ground_count = (ground_area * spec.points_per_m2 * 0.5).round() as usize;
    for _ in 0..ground_count {
        let x = rng.gen_range(gx.0..gx.1);
        let y = rng.gen_range(gy.0..gy.1);
        let z = spec.ground_z + gaussian(&mut rng, spec.ground_noise_sigma);
        push_point(&mut points, [x, y, z]);
    }

    // clutter: small point blobs above the ground
    for _ in 0..spec.clutter_count {
        let cx = rng.gen_range(gx.0..gx.1);
        let cy = rng.gen_range(gy.0..gy.1);
        let cz = spec.ground_z + rng.gen_range(0.2..1.8);
        for _ in 0..30 {
            push_point(
                &mut points,
                [
                    cx + gaussian(&mut rng, 0.25),
                    cy + gaussian(&mut rng, 0.25),
                    cz + gaussian(&mut rng, 0.25),
                ],
            );
        }
    }

    let labels = boxes.iter().map(|b| label_for_box(b, &calib)).collect();
    Ok((PointCloud { points }, labels, calib))
}

/// Exact KITTI-style label for a sensor-frame box under the given calibration.
fn label_for_box(b: &OrientedBox3D, calib: &Calibration) -> ObjectLabel {
    let (location, ry) = velo_box_to_label_pose(b, calib);
    let alpha = ry - location[0].atan2(location[2]);
    let corners = box_corners(b);
    let projected = project_points(&corners, calib);
    let (w, h) = (calib.image_size.0 as f64, calib.image_size.1 as f64);
    let mut bbox = [f64::MAX, f64::MAX, f64::MIN, f64::MIN];
    for p in projected.iter().filter(|p| !p.behind_camera()) {
        bbox[0] = bbox[0].min(p.u);
        bbox[1] = bbox[1].min(p.v);
        bbox[2] = bbox[2].max(p.u);
        bbox[3] = bbox[3].max(p.v);
    }
    let bbox2d = if bbox[0] > bbox[2] {
        [0.0, 0.0, 0.0, 0.0]
    } else {
        [
            bbox[0].clamp(0.0, w),
            bbox[1].clamp(0.0, h),
            bbox[2].clamp(0.0, w),
            bbox[3].clamp(0.0, h),
        ]
    };
    ObjectLabel {
        class_name: "Car".into(),
        truncation: 0.0,
        occlusion: 0,
        alpha: crate::voxel::normalize_angle(alpha),
        bbox2d,
        size: [b.height(), b.width(), b.length()],
        location,
        yaw: ry,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::label_to_velo_box;

    #[test]
    fn empty_scene_is_ground_only() {
        let spec = SceneSpec {
            vehicles: (0, 0),
            clutter_count: 0,
            ground_noise_sigma: 0.0,
            ..SceneSpec::default()
        };
        let (cloud, labels, _) = generate_scene(&spec).unwrap();
        assert!(labels.is_empty());
        assert!(!cloud.is_empty());
        // f32 storage rounds the exact ground height
        assert!(cloud
            .points
            .iter()
            .all(|p| (p.z as f64 - spec.ground_z).abs() < 1e-6));
    }

    #[test]
    fn same_seed_gives_identical_clouds() {
        let spec = SceneSpec::default();
        let (a, la, _) = generate_scene(&spec).unwrap();
        let (b, lb, _) = generate_scene(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let other = SceneSpec { seed: 1, ..spec };
        let (c, _, _) = generate_scene(&other).unwrap();
        assert_ne!(a, c);
    }

    /// Distance from a point to the surface of an oriented box.
    fn surface_distance(b: &OrientedBox3D, p: [f64; 3]) -> f64 {
        let (s, c) = b.yaw.sin_cos();
        let dx = p[0] - b.center[0];
        let dy = p[1] - b.center[1];
        let local = [
            c * dx + s * dy,
            -s * dx + c * dy,
            p[2] - b.center[2],
        ];
        let half = [b.size[0] * 0.5, b.size[1] * 0.5, b.size[2] * 0.5];
        let outside: f64 = (0..3)
            .map(|a| (local[a].abs() - half[a]).max(0.0).powi(2))
            .sum::<f64>()
            .sqrt();
        if outside > 0.0 {
            outside
        } else {
            // inside: distance to the nearest face
            (0..3).map(|a| half[a] - local[a].abs()).fold(f64::MAX, f64::min)
        }
    }

    #[test]
    fn vehicle_points_lie_on_their_labeled_box_surface() {
        let spec = SceneSpec {
            vehicles: (2, 2),
            clutter_count: 0,
            points_per_m2: 12.0,
            ..SceneSpec::default()
        };
        let (cloud, labels, calib) = generate_scene(&spec).unwrap();
        let boxes: Vec<OrientedBox3D> = labels
            .iter()
            .map(|l| label_to_velo_box(l, &calib).unwrap())
            .collect();
        // vehicle points are those near any box; each must sit on a surface
        let mut on_surface = 0usize;
        for p in &cloud.points {
            let q = [p.x as f64, p.y as f64, p.z as f64];
            let nearest = boxes
                .iter()
                .map(|b| surface_distance(b, q))
                .fold(f64::MAX, f64::min);
            if (q[2] - spec.ground_z).abs() > 0.2 && nearest < 0.5 {
                assert!(nearest < 1e-6, "vehicle point {q:?} off-surface by {nearest}");
                on_surface += 1;
            }
        }
        assert!(on_surface > 100, "expected many vehicle surface points");
    }

    #[test]
    fn footprints_are_pairwise_disjoint() {
        for seed in 0..8 {
            let spec = SceneSpec {
                vehicles: (3, 3),
                seed,
                ..SceneSpec::default()
            };
            let (_, labels, calib) = generate_scene(&spec).unwrap();
            let polys: Vec<_> = labels
                .iter()
                .map(|l| ground_plane_polygon(&label_to_velo_box(l, &calib).unwrap()))
                .collect();
            for i in 0..polys.len() {
                for j in i + 1..polys.len() {
                    assert_eq!(iou_rotated(&polys[i], &polys[j]), 0.0);
                }
            }
        }
    }

    #[test]
    fn infeasible_spec_errors_out() {
        let spec = SceneSpec {
            vehicles: (40, 40),
            x_range: (5.0, 7.0),
            y_range: (-1.0, 1.0),
            ..SceneSpec::default()
        };
        assert!(matches!(
            generate_scene(&spec),
            Err(SynthError::Infeasible { .. })
        ));
    }
}
