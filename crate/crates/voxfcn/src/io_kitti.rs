//! KITTI file readers (velodyne scans, object labels, calibration) and the
//! camera projection used by image-plane evaluation.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoKittiError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: String, reason: String },
    #[error("parse error in {path} line {line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
}

fn io_err(path: &Path, source: io::Error) -> IoKittiError {
    IoKittiError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One lidar return: sensor-frame meters plus unitless intensity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<LidarPoint>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// KITTI object label, one line of a label file. `location` and `yaw` live in
/// the (rectified) camera frame; `size` is stored in file order
/// (height, width, length).
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectLabel {
    pub class_name: String,
    pub truncation: f64,
    pub occlusion: i32,
    pub alpha: f64,
    /// (left, top, right, bottom) pixels.
    pub bbox2d: [f64; 4],
    /// (height, width, length) meters. Real KITTI uses -1 sentinels on
    /// DontCare rows, so positivity is only enforced when a label is
    /// converted into a 3D box.
    pub size: [f64; 3],
    /// Bottom-face center, camera frame, meters.
    pub location: [f64; 3],
    /// rotation_y, radians about the camera vertical axis.
    pub yaw: f64,
}

impl ObjectLabel {
    pub fn height(&self) -> f64 {
        self.size[0]
    }

    pub fn width(&self) -> f64 {
        self.size[1]
    }

    pub fn length(&self) -> f64 {
        self.size[2]
    }

    pub fn bbox_height_px(&self) -> f64 {
        self.bbox2d[3] - self.bbox2d[1]
    }
}

/// Rigid sensor-to-camera transform plus the camera projection (KITTI P2).
/// When an `R0_rect` row is present in the calib file it is folded into
/// `velo_to_cam`, so `cam_projection` applies directly to `velo_to_cam` output.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub velo_to_cam: [[f64; 4]; 4],
    pub cam_projection: [[f64; 4]; 3],
    /// (width, height) pixels; defaults to 1242x375 when the calib file has
    /// no `image_size` row (real KITTI files do not carry one).
    pub image_size: (u32, u32),
}

pub const DEFAULT_IMAGE_SIZE: (u32, u32) = (1242, 375);

impl Calibration {
    /// Sensor frame -> camera frame.
    pub fn transform_to_cam(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.velo_to_cam;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3],
        ]
    }

    /// Camera frame -> sensor frame (inverse of the rigid transform).
    pub fn transform_to_velo(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.velo_to_cam;
        let q = [p[0] - m[0][3], p[1] - m[1][3], p[2] - m[2][3]];
        [
            m[0][0] * q[0] + m[1][0] * q[1] + m[2][0] * q[2],
            m[0][1] * q[0] + m[1][1] * q[1] + m[2][1] * q[2],
            m[0][2] * q[0] + m[1][2] * q[1] + m[2][2] * q[2],
        ]
    }

    /// Rotates a direction (no translation) sensor -> camera.
    pub fn rotate_to_cam(&self, d: [f64; 3]) -> [f64; 3] {
        let m = &self.velo_to_cam;
        [
            m[0][0] * d[0] + m[0][1] * d[1] + m[0][2] * d[2],
            m[1][0] * d[0] + m[1][1] * d[1] + m[1][2] * d[2],
            m[2][0] * d[0] + m[2][1] * d[1] + m[2][2] * d[2],
        ]
    }

    /// Rotates a direction camera -> sensor.
    pub fn rotate_to_velo(&self, d: [f64; 3]) -> [f64; 3] {
        let m = &self.velo_to_cam;
        [
            m[0][0] * d[0] + m[1][0] * d[1] + m[2][0] * d[2],
            m[0][1] * d[0] + m[1][1] * d[1] + m[2][1] * d[2],
            m[0][2] * d[0] + m[1][2] * d[1] + m[2][2] * d[2],
        ]
    }
}

/// Image-plane projection of one 3D point. `depth` is the camera-frame z;
/// points with `depth <= 0` lie behind the camera and are flagged rather than
/// dropped (evaluation decides what to do with them).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl ProjectedPoint {
    pub fn behind_camera(&self) -> bool {
        self.depth <= 0.0
    }
}

const POINT_RECORD_BYTES: usize = 16;

/// Reads a KITTI velodyne scan: little-endian f32 quadruples (x, y, z, intensity).
pub fn read_velodyne_bin(path: &Path) -> Result<PointCloud, IoKittiError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode_velodyne(&bytes).map_err(|reason| IoKittiError::MalformedFile {
        path: path.display().to_string(),
        reason,
    })
}

fn decode_velodyne(bytes: &[u8]) -> Result<PointCloud, String> {
    if bytes.len() % POINT_RECORD_BYTES != 0 {
        return Err(format!(
            "length {} is not a multiple of {POINT_RECORD_BYTES}",
            bytes.len()
        ));
    }
    let mut points = Vec::with_capacity(bytes.len() / POINT_RECORD_BYTES);
    for (rec, chunk) in bytes.chunks_exact(POINT_RECORD_BYTES).enumerate() {
        let f = |o: usize| f32::from_le_bytes([chunk[o], chunk[o + 1], chunk[o + 2], chunk[o + 3]]);
        let p = LidarPoint {
            x: f(0),
            y: f(4),
            z: f(8),
            intensity: f(12),
        };
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            return Err(format!("non-finite coordinate in record {rec}"));
        }
        points.push(p);
    }
    Ok(PointCloud { points })
}

/// Writes a point cloud in the exact on-disk format [`read_velodyne_bin`] reads.
pub fn write_velodyne_bin(path: &Path, cloud: &PointCloud) -> Result<(), IoKittiError> {
    let mut bytes = Vec::with_capacity(cloud.len() * POINT_RECORD_BYTES);
    for p in &cloud.points {
        bytes.extend_from_slice(&p.x.to_le_bytes());
        bytes.extend_from_slice(&p.y.to_le_bytes());
        bytes.extend_from_slice(&p.z.to_le_bytes());
        bytes.extend_from_slice(&p.intensity.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

const LABEL_FIELDS: usize = 15;

/// Parses a KITTI label file: 15 whitespace-separated fields per non-empty line.
pub fn parse_label_file(path: &Path) -> Result<Vec<ObjectLabel>, IoKittiError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        labels.push(parse_label_line(line).map_err(|reason| IoKittiError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            reason,
        })?);
    }
    Ok(labels)
}

fn parse_label_line(line: &str) -> Result<ObjectLabel, String> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != LABEL_FIELDS {
        return Err(format!("expected {LABEL_FIELDS} fields, got {}", fields.len()));
    }
    let num = |idx: usize| -> Result<f64, String> {
        fields[idx]
            .parse::<f64>()
            .map_err(|_| format!("field {idx} is not a number: {:?}", fields[idx]))
    };
    let bbox2d = [num(4)?, num(5)?, num(6)?, num(7)?];
    if bbox2d[2] < bbox2d[0] || bbox2d[3] < bbox2d[1] {
        return Err(format!("2D box is inverted: {bbox2d:?}"));
    }
    Ok(ObjectLabel {
        class_name: fields[0].to_string(),
        truncation: num(1)?,
        occlusion: num(2)? as i32,
        alpha: num(3)?,
        bbox2d,
        size: [num(8)?, num(9)?, num(10)?],
        location: [num(11)?, num(12)?, num(13)?],
        yaw: num(14)?,
    })
}

/// Serializes labels in the format [`parse_label_file`] reads.
pub fn write_label_file(path: &Path, labels: &[ObjectLabel]) -> Result<(), IoKittiError> {
    let mut text = String::new();
    for l in labels {
        text.push_str(&format!(
            "{} {:.8} {} {:.8} {:.8} {:.8} {:.8} {:.8} {:.8} {:.8} {:.8} {:.8} {:.8} {:.8} {:.8}\n",
            l.class_name,
            l.truncation,
            l.occlusion,
            l.alpha,
            l.bbox2d[0],
            l.bbox2d[1],
            l.bbox2d[2],
            l.bbox2d[3],
            l.size[0],
            l.size[1],
            l.size[2],
            l.location[0],
            l.location[1],
            l.location[2],
            l.yaw
        ));
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Parses a KITTI calibration file. `P2:` and `Tr_velo_to_cam:` are required;
/// `R0_rect:` (folded into the rigid transform) and `image_size:` are optional.
pub fn parse_calib(path: &Path) -> Result<Calibration, IoKittiError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut p2: Option<Vec<f64>> = None;
    let mut tr: Option<Vec<f64>> = None;
    let mut r0: Option<Vec<f64>> = None;
    let mut image_size: Option<(u32, u32)> = None;

    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, rest)) = line.split_once(':') else {
            continue;
        };
        let parse_floats = |expect: usize| -> Result<Vec<f64>, IoKittiError> {
            let vals: Result<Vec<f64>, _> =
                rest.split_whitespace().map(|t| t.parse::<f64>()).collect();
            let vals = vals.map_err(|_| IoKittiError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                reason: format!("non-numeric value in {key} row"),
            })?;
            if vals.len() != expect {
                return Err(IoKittiError::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    reason: format!("{key} expects {expect} floats, got {}", vals.len()),
                });
            }
            Ok(vals)
        };
        match key.trim() {
            "P2" => p2 = Some(parse_floats(12)?),
            "Tr_velo_to_cam" => tr = Some(parse_floats(12)?),
            "R0_rect" | "R_rect" => r0 = Some(parse_floats(9)?),
            "image_size" => {
                let vals = parse_floats(2)?;
                image_size = Some((vals[0] as u32, vals[1] as u32));
            }
            _ => {} // other rows (P0, P1, P3, Tr_imu_to_velo, ...) are ignored
        }
    }

    let missing = |key: &str| IoKittiError::Parse {
        path: path.display().to_string(),
        line: 0,
        reason: format!("missing required key {key}"),
    };
    let p2 = p2.ok_or_else(|| missing("P2"))?;
    let tr = tr.ok_or_else(|| missing("Tr_velo_to_cam"))?;

    let mut cam_projection = [[0.0; 4]; 3];
    for r in 0..3 {
        for c in 0..4 {
            cam_projection[r][c] = p2[r * 4 + c];
        }
    }
    let mut velo_to_cam = [[0.0; 4]; 4];
    for r in 0..3 {
        for c in 0..4 {
            velo_to_cam[r][c] = tr[r * 4 + c];
        }
    }
    velo_to_cam[3] = [0.0, 0.0, 0.0, 1.0];
    if let Some(r0) = r0 {
        velo_to_cam = compose_r0(&r0, &velo_to_cam);
    }

    Ok(Calibration {
        velo_to_cam,
        cam_projection,
        image_size: image_size.unwrap_or(DEFAULT_IMAGE_SIZE),
    })
}

fn compose_r0(r0: &[f64], tr: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
    let mut out = [[0.0; 4]; 4];
    for r in 0..3 {
        for c in 0..4 {
            let mut acc = 0.0;
            for k in 0..3 {
                acc += r0[r * 3 + k] * tr[k][c];
            }
            out[r][c] = acc;
        }
    }
    out[3] = [0.0, 0.0, 0.0, 1.0];
    out
}

/// Writes a calibration file readable by [`parse_calib`].
pub fn write_calib(path: &Path, calib: &Calibration) -> Result<(), IoKittiError> {
    let row12 = |m: &[[f64; 4]]| {
        m.iter()
            .flat_map(|r| r.iter())
            .map(|v| format!("{v:.12e}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let text = format!(
        "P2: {}\nTr_velo_to_cam: {}\nimage_size: {} {}\n",
        row12(&calib.cam_projection),
        row12(&calib.velo_to_cam[..3]),
        calib.image_size.0,
        calib.image_size.1
    );
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Projects sensor-frame points through `velo_to_cam` and `cam_projection`
/// with a perspective divide. Total: points behind the camera come back with
/// `depth <= 0` rather than being dropped.
pub fn project_points(points: &[[f64; 3]], calib: &Calibration) -> Vec<ProjectedPoint> {
    points
        .iter()
        .map(|&p| {
            let c = calib.transform_to_cam(p);
            let m = &calib.cam_projection;
            let uw = m[0][0] * c[0] + m[0][1] * c[1] + m[0][2] * c[2] + m[0][3];
            let vw = m[1][0] * c[0] + m[1][1] * c[1] + m[1][2] * c[2] + m[1][3];
            let w = m[2][0] * c[0] + m[2][1] * c[1] + m[2][2] * c[2] + m[2][3];
            ProjectedPoint {
                u: uw / w,
                v: vw / w,
                depth: c[2],
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use tempfile::NamedTempFile;

    fn identity_calib() -> Calibration {
        let mut velo_to_cam = [[0.0; 4]; 4];
        for i in 0..4 {
            velo_to_cam[i][i] = 1.0;
        }
        Calibration {
            velo_to_cam,
            cam_projection: [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ],
            image_size: DEFAULT_IMAGE_SIZE,
        }
    }

    #[test]
    fn reads_single_record() {
        let mut f = NamedTempFile::new().unwrap();
        for v in [1.0f32, 2.0, 3.0, 0.5] {
            f.write_all(&v.to_le_bytes()).unwrap();
        }
        let cloud = read_velodyne_bin(f.path()).unwrap();
        assert_eq!(cloud.points.len(), 1);
        assert_eq!(
            cloud.points[0],
            LidarPoint {
                x: 1.0,
                y: 2.0,
                z: 3.0,
                intensity: 0.5
            }
        );
    }

    #[test]
    fn empty_file_is_empty_cloud() {
        let f = NamedTempFile::new().unwrap();
        assert!(read_velodyne_bin(f.path()).unwrap().is_empty());
    }

    #[test]
    fn odd_length_is_malformed() {
        let mut f = NamedTempFile::new().unwrap();
        f.write_all(&[0u8; 17]).unwrap();
        assert!(matches!(
            read_velodyne_bin(f.path()),
            Err(IoKittiError::MalformedFile { .. })
        ));
    }

    #[test]
    fn write_read_roundtrip_is_bit_exact() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let cloud = PointCloud {
            points: (0..257)
                .map(|_| LidarPoint {
                    x: rng.gen_range(-80.0..80.0),
                    y: rng.gen_range(-80.0..80.0),
                    z: rng.gen_range(-4.0..4.0),
                    intensity: rng.gen_range(0.0..1.0),
                })
                .collect(),
        };
        let f = NamedTempFile::new().unwrap();
        write_velodyne_bin(f.path(), &cloud).unwrap();
        assert_eq!(read_velodyne_bin(f.path()).unwrap(), cloud);
    }

    #[test]
    fn parses_label_line() {
        let mut f = NamedTempFile::new().unwrap();
        writeln!(f, "Car 0.0 0 1.57 100 120 200 220 1.5 1.6 4.0 2.0 1.5 15.0 1.57").unwrap();
        let labels = parse_label_file(f.path()).unwrap();
        assert_eq!(labels.len(), 1);
        assert_eq!(labels[0].class_name, "Car");
        assert_eq!(labels[0].yaw, 1.57);
        assert_eq!(labels[0].location, [2.0, 1.5, 15.0]);
        assert_eq!(labels[0].size, [1.5, 1.6, 4.0]);
    }

    #[test]
    fn empty_label_file_is_empty() {
        let f = NamedTempFile::new().unwrap();
        assert!(parse_label_file(f.path()).unwrap().is_empty());
    }

    #[test]
    fn short_label_line_is_parse_error_with_line_number() {
        let mut f = NamedTempFile::new().unwrap();
        writeln!(f, "Car 0.0 0 1.57 100 120 200 220 1.5 1.6 4.0 2.0 1.5 15.0 1.57").unwrap();
        writeln!(f, "Car 0.0 0 1.57 100 120 200 220 1.5 1.6 4.0 2.0 1.5 15.0").unwrap();
        match parse_label_file(f.path()) {
            Err(IoKittiError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dontcare_sentinels_parse() {
        let mut f = NamedTempFile::new().unwrap();
        writeln!(
            f,
            "DontCare -1 -1 -10 559.62 175.83 575.40 183.15 -1 -1 -1 -1000 -1000 -1000 -10"
        )
        .unwrap();
        let labels = parse_label_file(f.path()).unwrap();
        assert_eq!(labels[0].class_name, "DontCare");
    }

    #[test]
    fn parses_calib_and_promotes_tr() {
        let mut f = NamedTempFile::new().unwrap();
        writeln!(f, "P2: 1 0 0 0 0 1 0 0 0 0 1 0").unwrap();
        writeln!(f, "Tr_velo_to_cam: 1 0 0 0 0 1 0 0 0 0 1 0").unwrap();
        let calib = parse_calib(f.path()).unwrap();
        assert_eq!(calib.velo_to_cam[3], [0.0, 0.0, 0.0, 1.0]);
        assert_eq!(calib.velo_to_cam[0], [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(calib.image_size, DEFAULT_IMAGE_SIZE);
    }

    #[test]
    fn missing_tr_is_parse_error() {
        let mut f = NamedTempFile::new().unwrap();
        writeln!(f, "P2: 1 0 0 0 0 1 0 0 0 0 1 0").unwrap();
        assert!(matches!(
            parse_calib(f.path()),
            Err(IoKittiError::Parse { .. })
        ));
    }

    #[test]
    fn wrong_float_count_is_parse_error() {
        let mut f = NamedTempFile::new().unwrap();
        writeln!(f, "P2: 1 0 0 0 0 1 0 0 0 0 1").unwrap();
        writeln!(f, "Tr_velo_to_cam: 1 0 0 0 0 1 0 0 0 0 1 0").unwrap();
        assert!(matches!(
            parse_calib(f.path()),
            Err(IoKittiError::Parse { .. })
        ));
    }

    #[test]
    fn principal_ray_projects_to_origin() {
        let calib = identity_calib();
        let out = project_points(&[[0.0, 0.0, 10.0]], &calib);
        assert_eq!(out.len(), 1);
        assert!(out[0].u.abs() < 1e-12 && out[0].v.abs() < 1e-12);
        assert!((out[0].depth - 10.0).abs() < 1e-12);
        assert!(!out[0].behind_camera());
    }

    #[test]
    fn empty_input_projects_to_empty() {
        assert!(project_points(&[], &identity_calib()).is_empty());
    }

    #[test]
    fn behind_camera_is_flagged() {
        let out = project_points(&[[0.0, 0.0, -5.0]], &identity_calib());
        assert!(out[0].behind_camera());
    }

    #[test]
    fn projection_matches_matrix_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        // random rigid-ish transform: rotation about z plus translation
        let ang: f64 = rng.gen_range(-1.0..1.0);
        let (s, c) = ang.sin_cos();
        let calib = Calibration {
            velo_to_cam: [
                [c, -s, 0.0, 0.3],
                [s, c, 0.0, -0.2],
                [0.0, 0.0, 1.0, 1.1],
                [0.0, 0.0, 0.0, 1.0],
            ],
            cam_projection: [
                [720.0, 0.0, 600.0, 45.0],
                [0.0, 720.0, 180.0, -0.3],
                [0.0, 0.0, 1.0, 0.005],
            ],
            image_size: DEFAULT_IMAGE_SIZE,
        };
        for _ in 0..200 {
            let p = [
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-20.0..20.0),
                rng.gen_range(2.0..40.0),
            ];
            // oracle: explicit 4x4 then 3x4 multiply in homogeneous coordinates
            let hom = [p[0], p[1], p[2], 1.0];
            let mut cam = [0.0f64; 4];
            for r in 0..4 {
                for k in 0..4 {
                    cam[r] += calib.velo_to_cam[r][k] * hom[k];
                }
            }
            let mut img = [0.0f64; 3];
            for r in 0..3 {
                for k in 0..4 {
                    img[r] += calib.cam_projection[r][k] * cam[k];
                }
            }
            let got = project_points(&[p], &calib)[0];
            assert!((got.u - img[0] / img[2]).abs() < 1e-9);
            assert!((got.v - img[1] / img[2]).abs() < 1e-9);
            assert!((got.depth - cam[2]).abs() < 1e-9);
        }
    }
}
