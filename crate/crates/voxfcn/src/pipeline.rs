//! Shared plumbing between the CLI and the integration tests: the on-disk
//! scene-trio layout, the detection file format, and dataset-level evaluation.
//!
//! A data directory holds KITTI-format trios:
//!
//! ```text
//! <dir>/velodyne/<id>.bin   raw little-endian f32 x,y,z,intensity records
//! <dir>/labels/<id>.txt     15-field KITTI object labels
//! <dir>/calib/<id>.txt      P2 / Tr_velo_to_cam (R0_rect honored if present)
//! <dir>/index.txt           optional scene id list, one per line
//! ```
//!
//! Detection files are plain text, one detection per line:
//! scene id, 24 corner floats (x1 y1 z1 ... x8 y8 z8), center (3), size
//! length width height, yaw, neighbor-count score, objectness probability.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::Config;
use crate::eval::{
    average_precision, match_detections, DetOutcome, Difficulty, EvalConfig, Metric, PrCurve,
};
use crate::fcn3d::{forward, NetworkParams, OutputMaps};
use crate::inference::{extract_candidates, score_candidates, suppress, Candidate, Detection};
use crate::io_kitti::{
    parse_calib, parse_label_file, read_velodyne_bin, write_calib, write_label_file,
    write_velodyne_bin, Calibration, IoKittiError, ObjectLabel, PointCloud,
};
use crate::voxel::{voxelize, OrientedBox3D};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoKittiError),
    #[error("i/o error on {path}: {source}")]
    Fs {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("data error: {0}")]
    Data(String),
}

fn fs_err(path: &Path, source: io::Error) -> PipelineError {
    PipelineError::Fs {
        path: path.display().to_string(),
        source,
    }
}

pub const VELODYNE_DIR: &str = "velodyne";
pub const LABELS_DIR: &str = "labels";
pub const CALIB_DIR: &str = "calib";
pub const INDEX_FILE: &str = "index.txt";

pub fn scene_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(VELODYNE_DIR).join(format!("{id}.bin")),
        dir.join(LABELS_DIR).join(format!("{id}.txt")),
        dir.join(CALIB_DIR).join(format!("{id}.txt")),
    )
}

/// Scene ids from index.txt when present, otherwise the sorted velodyne stems.
pub fn list_scene_ids(dir: &Path) -> Result<Vec<String>, PipelineError> {
    let index = dir.join(INDEX_FILE);
    if index.exists() {
        let text = fs::read_to_string(&index).map_err(|e| fs_err(&index, e))?;
        return Ok(text
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect());
    }
    let velo_dir = dir.join(VELODYNE_DIR);
    let entries = fs::read_dir(&velo_dir).map_err(|e| fs_err(&velo_dir, e))?;
    let mut ids: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            if p.extension().is_some_and(|x| x == "bin") {
                p.file_stem().map(|s| s.to_string_lossy().into_owned())
            } else {
                None
            }
        })
        .collect();
    ids.sort();
    Ok(ids)
}

pub struct SceneData {
    pub id: String,
    pub cloud: PointCloud,
    pub labels: Vec<ObjectLabel>,
    pub calib: Calibration,
}

/// Reads one trio. Labels are optional (detection on unlabeled data).
pub fn load_scene(dir: &Path, id: &str) -> Result<SceneData, PipelineError> {
    let (velo, labels_path, calib_path) = scene_paths(dir, id);
    let cloud = read_velodyne_bin(&velo)?;
    let labels = if labels_path.exists() {
        parse_label_file(&labels_path)?
    } else {
        Vec::new()
    };
    let calib = parse_calib(&calib_path)?;
    Ok(SceneData {
        id: id.to_string(),
        cloud,
        labels,
        calib,
    })
}

/// Writes one trio plus nothing else; directories are created as needed.
pub fn write_scene(dir: &Path, id: &str, scene: &SceneData) -> Result<(), PipelineError> {
    for sub in [VELODYNE_DIR, LABELS_DIR, CALIB_DIR] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| fs_err(&d, e))?;
    }
    let (velo, labels, calib) = scene_paths(dir, id);
    write_velodyne_bin(&velo, &scene.cloud)?;
    write_label_file(&labels, &scene.labels)?;
    write_calib(&calib, &scene.calib)?;
    Ok(())
}

/// Full testing pipeline on one voxelized scene: forward, decode, score,
/// cap, suppress. Returns (pre-suppression candidates, final detections).
pub fn detect_scene(
    params: &NetworkParams,
    cfg: &Config,
    cloud: &PointCloud,
) -> Result<(Vec<Candidate>, Vec<Detection>), crate::fcn3d::Fcn3dError> {
    let grid = voxelize(cloud, &cfg.grid);
    let (maps, _) = forward(&grid, params)?;
    Ok(decode_maps(&maps, cfg))
}

/// Decode + score + suppress on precomputed output maps.
pub fn decode_maps(maps: &OutputMaps, cfg: &Config) -> (Vec<Candidate>, Vec<Detection>) {
    let mut candidates = extract_candidates(maps, &cfg.grid, cfg.infer.threshold);
    if candidates.len() > cfg.infer.max_candidates {
        candidates.sort_by(|a, b| {
            b.objectness
                .total_cmp(&a.objectness)
                .then(a.source_region.cmp(&b.source_region))
        });
        candidates.truncate(cfg.infer.max_candidates);
        candidates.sort_by(|a, b| a.source_region.cmp(&b.source_region));
    }
    let mut dets = score_candidates(&candidates, cfg.infer.neighbor_radius);
    if dets.len() > cfg.infer.max_detections {
        dets.sort_by(|a, b| {
            b.score
                .cmp(&a.score)
                .then(b.objectness.total_cmp(&a.objectness))
                .then(a.source_region.cmp(&b.source_region))
        });
        dets.truncate(cfg.infer.max_detections);
    }
    let kept = suppress(&dets, cfg.infer.suppress_overlap);
    (candidates, kept)
}

fn detection_line(id: &str, d: &Detection) -> String {
    let mut fields: Vec<String> = Vec::with_capacity(34);
    fields.push(id.to_string());
    for corner in &d.corners {
        for v in corner {
            fields.push(format!("{v:.6}"));
        }
    }
    for v in d.box3d.center {
        fields.push(format!("{v:.6}"));
    }
    for v in d.box3d.size {
        fields.push(format!("{v:.6}"));
    }
    fields.push(format!("{:.6}", d.box3d.yaw));
    fields.push(d.score.to_string());
    fields.push(format!("{:.6}", d.objectness));
    fields.join(" ")
}

/// Writes a detection file (column order documented at the module level).
pub fn write_detections(
    path: &Path,
    per_scene: &[(String, Vec<Detection>)],
) -> Result<(), PipelineError> {
    let mut text = String::new();
    for (id, dets) in per_scene {
        for d in dets {
            text.push_str(&detection_line(id, d));
            text.push('\n');
        }
    }
    fs::write(path, text).map_err(|e| fs_err(path, e))
}

/// Writes the pre-suppression candidate dump (same columns minus box fit and
/// neighbor score: scene id, 24 corner floats, objectness).
pub fn write_candidates(
    path: &Path,
    per_scene: &[(String, Vec<Candidate>)],
) -> Result<(), PipelineError> {
    let mut text = String::new();
    for (id, cands) in per_scene {
        for c in cands {
            let mut fields: Vec<String> = Vec::with_capacity(26);
            fields.push(id.clone());
            for corner in &c.corners {
                for v in corner {
                    fields.push(format!("{v:.6}"));
                }
            }
            fields.push(format!("{:.6}", c.objectness));
            text.push_str(&fields.join(" "));
            text.push('\n');
        }
    }
    fs::write(path, text).map_err(|e| fs_err(path, e))
}

/// Reads a detection file back, grouped by scene id in file order.
pub fn read_detections(path: &Path) -> Result<Vec<(String, Vec<Detection>)>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| fs_err(path, e))?;
    let mut per_scene: Vec<(String, Vec<Detection>)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 34 {
            return Err(PipelineError::Data(format!(
                "{} line {}: expected 34 columns, got {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let id = fields[0].to_string();
        let num = |i: usize| -> Result<f64, PipelineError> {
            fields[i].parse().map_err(|_| {
                PipelineError::Data(format!(
                    "{} line {}: bad number {:?}",
                    path.display(),
                    lineno + 1,
                    fields[i]
                ))
            })
        };
        let mut corners = [[0.0f64; 3]; 8];
        for k in 0..8 {
            for a in 0..3 {
                corners[k][a] = num(1 + 3 * k + a)?;
            }
        }
        let center = [num(25)?, num(26)?, num(27)?];
        let size = [num(28)?, num(29)?, num(30)?];
        let yaw = num(31)?;
        let score: usize = fields[32].parse().map_err(|_| {
            PipelineError::Data(format!(
                "{} line {}: bad score {:?}",
                path.display(),
                lineno + 1,
                fields[32]
            ))
        })?;
        let objectness = num(33)?;
        let box3d = OrientedBox3D::new(center, size, yaw)
            .map_err(|e| PipelineError::Data(format!("{} line {}: {e}", path.display(), lineno + 1)))?;
        let det = Detection {
            box3d,
            corners,
            score,
            objectness,
            source_region: [0, 0, 0],
        };
        match per_scene.last_mut() {
            Some((last_id, dets)) if *last_id == id => dets.push(det),
            _ => per_scene.push((id, vec![det])),
        }
    }
    Ok(per_scene)
}

/// One row of the evaluation report.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub metric: Metric,
    pub difficulty: Difficulty,
    pub curve: PrCurve,
}

/// Ground truth for evaluation: labels + calibration per scene id.
pub struct GtFrame {
    pub id: String,
    pub labels: Vec<ObjectLabel>,
    pub calib: Calibration,
}

/// Matches detections against ground truth per frame, pools outcomes over the
/// dataset, and computes AP/AOS for every metric x difficulty combination.
/// Detections are ranked by (neighbor score, objectness).
pub fn evaluate(
    detections: &[(String, Vec<Detection>)],
    gt: &[GtFrame],
    iou_threshold: f64,
    difficulty_mode: crate::eval::DifficultyMode,
) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for metric in [Metric::ImagePlane, Metric::GroundPlane] {
        for difficulty in Difficulty::ALL {
            let cfg = EvalConfig {
                metric,
                iou_threshold,
                difficulty,
                difficulty_mode,
            };
            let mut pooled: Vec<(f64, DetOutcome)> = Vec::new();
            let mut total_gt = 0usize;
            for frame in gt {
                let empty = Vec::new();
                let dets = detections
                    .iter()
                    .find(|(id, _)| *id == frame.id)
                    .map(|(_, d)| d)
                    .unwrap_or(&empty);
                let mut ranked: Vec<&Detection> = dets.iter().collect();
                ranked.sort_by(|a, b| {
                    b.score
                        .cmp(&a.score)
                        .then(b.objectness.total_cmp(&a.objectness))
                });
                let owned: Vec<Detection> = ranked.into_iter().cloned().collect();
                let m = match_detections(&owned, &frame.labels, &frame.calib, &cfg);
                total_gt += m.counted_gt;
                for (det, outcome) in owned.iter().zip(m.outcomes) {
                    // pooled rank key: neighbor count plus objectness tiebreak
                    pooled.push((det.score as f64 + det.objectness.clamp(0.0, 1.0), outcome));
                }
            }
            rows.push(ReportRow {
                metric,
                difficulty,
                curve: average_precision(&pooled, total_gt),
            });
        }
    }
    rows
}

/// Plain-text report table.
pub fn format_report(rows: &[ReportRow]) -> String {
    let mut out = String::from("metric        difficulty   AP       AOS\n");
    for row in rows {
        out.push_str(&format!(
            "{:<13} {:<12} {:>7.4}  {:>7.4}\n",
            row.metric.name(),
            row.difficulty.name(),
            row.curve.ap,
            row.curve.aos
        ));
    }
    out
}

/// Machine-readable dump of AP/AOS values and PR points.
pub fn format_pr_dump(rows: &[ReportRow], iou_threshold: f64) -> String {
    let mut out = String::new();
    for row in rows {
        out.push_str(&format!(
            "ap metric={} difficulty={} iou={} value={:.6}\n",
            row.metric.name(),
            row.difficulty.name(),
            iou_threshold,
            row.curve.ap
        ));
        out.push_str(&format!(
            "aos metric={} difficulty={} iou={} value={:.6}\n",
            row.metric.name(),
            row.difficulty.name(),
            iou_threshold,
            row.curve.aos
        ));
        for (recall, precision) in &row.curve.points {
            out.push_str(&format!(
                "pr metric={} difficulty={} iou={} recall={:.6} precision={:.6}\n",
                row.metric.name(),
                row.difficulty.name(),
                iou_threshold,
                recall,
                precision
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, SceneSpec};
    use crate::voxel::box_corners;
    use tempfile::tempdir;

    #[test]
    fn scene_roundtrip_through_disk() {
        let dir = tempdir().unwrap();
        let (cloud, labels, calib) = generate_scene(&SceneSpec::default()).unwrap();
        let scene = SceneData {
            id: "000000".into(),
            cloud,
            labels,
            calib,
        };
        write_scene(dir.path(), "000000", &scene).unwrap();
        let back = load_scene(dir.path(), "000000").unwrap();
        assert_eq!(back.cloud, scene.cloud);
        assert_eq!(back.labels.len(), scene.labels.len());
        assert_eq!(back.calib.image_size, scene.calib.image_size);
        assert_eq!(list_scene_ids(dir.path()).unwrap(), vec!["000000"]);
    }

    #[test]
    fn detection_file_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("dets.txt");
        let b = OrientedBox3D::new([5.0, 1.0, -1.0], [4.2, 1.8, 1.5], 0.37).unwrap();
        let det = Detection {
            box3d: b,
            corners: box_corners(&b),
            score: 7,
            objectness: 0.93,
            source_region: [1, 2, 3],
        };
        write_detections(&path, &[("000001".into(), vec![det.clone()])]).unwrap();
        let back = read_detections(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].0, "000001");
        let d = &back[0].1[0];
        assert_eq!(d.score, 7);
        for a in 0..3 {
            assert!((d.box3d.center[a] - b.center[a]).abs() < 1e-5);
            assert!((d.box3d.size[a] - b.size[a]).abs() < 1e-5);
        }
    }

    #[test]
    fn truncated_detection_line_is_data_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("dets.txt");
        std::fs::write(&path, "000001 1.0 2.0\n").unwrap();
        assert!(matches!(
            read_detections(&path),
            Err(PipelineError::Data(_))
        ));
    }

    #[test]
    fn ground_truth_fed_back_as_detections_is_perfect() {
        // build 3 synthetic frames; feed their ground truth boxes as detections
        let mut detections = Vec::new();
        let mut gt_frames = Vec::new();
        for seed in 0..3u64 {
            let spec = SceneSpec {
                seed,
                ..SceneSpec::default()
            };
            let (_, labels, calib) = generate_scene(&spec).unwrap();
            let dets: Vec<Detection> = labels
                .iter()
                .map(|l| {
                    let b = crate::voxel::label_to_velo_box(l, &calib).unwrap();
                    Detection {
                        box3d: b,
                        corners: box_corners(&b),
                        score: 1,
                        objectness: 1.0,
                        source_region: [0, 0, 0],
                    }
                })
                .collect();
            let id = format!("{seed:06}");
            detections.push((id.clone(), dets));
            gt_frames.push(GtFrame {
                id,
                labels,
                calib,
            });
        }
        let rows = evaluate(&detections, &gt_frames, 0.7, crate::eval::DifficultyMode::Range3d);
        assert_eq!(rows.len(), 6);
        for row in rows {
            assert!(
                (row.curve.ap - 1.0).abs() < 1e-12,
                "{} {} ap {}",
                row.metric.name(),
                row.difficulty.name(),
                row.curve.ap
            );
            assert!((row.curve.aos - 1.0).abs() < 1e-12);
        }
    }
}
