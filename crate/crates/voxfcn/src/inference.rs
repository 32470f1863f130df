//! Testing-phase pipeline: decode per-cell corner predictions into candidate
//! boxes, score each candidate by counting its neighbors among all candidates,
//! and greedily suppress overlapping detections.

use std::collections::HashMap;

use thiserror::Error;

use crate::eval::{ground_plane_polygon, iou_rotated};
use crate::fcn3d::{OutputMaps, BOXMAP_CHANNELS, OBJECTNESS_CHANNELS};
use crate::voxel::{normalize_angle, GridSpec, OrientedBox3D};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("degenerate box: {0}")]
    DegenerateBox(String),
}

/// One decoded region prediction: 8 corners in world meters plus the
/// foreground probability of its source cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub corners: [[f64; 3]; 8],
    pub source_region: [usize; 3],
    pub objectness: f64,
}

/// A candidate promoted to a detection: least-squares box fit plus the
/// neighbor-count score (a candidate always neighbors itself).
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub box3d: OrientedBox3D,
    pub corners: [[f64; 3]; 8],
    pub score: usize,
    pub objectness: f64,
    pub source_region: [usize; 3],
}

/// Foreground probability of one cell under the negated-logit softmax.
#[inline]
pub fn foreground_probability(o0: f64, o1: f64) -> f64 {
    // exp(-o1) / (exp(-o0) + exp(-o1)) = 1 / (1 + exp(o1 - o0))
    1.0 / (1.0 + (o1 - o0).exp())
}

/// Decodes every cell whose foreground probability reaches `threshold`:
/// corner k coordinate a = boxmap[3k + a] + region center.
pub fn extract_candidates(maps: &OutputMaps, spec: &GridSpec, threshold: f64) -> Vec<Candidate> {
    assert_eq!(maps.objectness.shape()[0], OBJECTNESS_CHANNELS);
    assert_eq!(maps.boxmap.shape()[0], BOXMAP_CHANNELS);
    let n = spec.num_cells();
    assert_eq!(maps.objectness.len(), OBJECTNESS_CHANNELS * n);
    let obj = maps.objectness.data();
    let boxes = maps.boxmap.data();
    let mut out = Vec::new();
    for f in 0..n {
        let p = foreground_probability(obj[f] as f64, obj[n + f] as f64);
        if p < threshold {
            continue;
        }
        let idx = spec.unflatten(f);
        let center = spec.center_unchecked(idx);
        let mut corners = [[0.0f64; 3]; 8];
        for (k, corner) in corners.iter_mut().enumerate() {
            for a in 0..3 {
                corner[a] = boxes[(3 * k + a) * n + f] as f64 + center[a];
            }
        }
        out.push(Candidate {
            corners,
            source_region: idx,
            objectness: p,
        });
    }
    out
}

fn corner_mean(c: &[[f64; 3]; 8]) -> [f64; 3] {
    let mut m = [0.0; 3];
    for corner in c {
        for a in 0..3 {
            m[a] += corner[a];
        }
    }
    m.map(|v| v / 8.0)
}

/// Mean distance over corresponding corners.
fn mean_corner_distance(a: &[[f64; 3]; 8], b: &[[f64; 3]; 8]) -> f64 {
    let mut sum = 0.0;
    for (ca, cb) in a.iter().zip(b) {
        sum += ((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2) + (ca[2] - cb[2]).powi(2)).sqrt();
    }
    sum / 8.0
}

/// Scores each candidate by the number of candidates (itself included) whose
/// mean corner distance lies within `neighbor_radius`, and fits a box to its
/// corners. Candidates whose box fit is degenerate still count as neighbors of
/// others but produce no detection.
///
/// Mean corner distance within r implies the corner centroids lie within r,
/// so candidates are binned by centroid on a grid of cell size r and only the
/// 27 surrounding bins are compared.
pub fn score_candidates(cands: &[Candidate], neighbor_radius: f64) -> Vec<Detection> {
    let r = neighbor_radius.max(1e-9);
    let key_of = |c: &[f64; 3]| -> [i64; 3] { c.map(|v| (v / r).floor() as i64) };
    let centers: Vec<[f64; 3]> = cands.iter().map(|c| corner_mean(&c.corners)).collect();
    let mut bins: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, c) in centers.iter().enumerate() {
        bins.entry(key_of(c)).or_default().push(i);
    }

    let score_one = |i: usize| -> usize {
        let key = key_of(&centers[i]);
        let mut count = 0usize;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(members) = bins.get(&[key[0] + dx, key[1] + dy, key[2] + dz]) else {
                        continue;
                    };
                    for &j in members {
                        if mean_corner_distance(&cands[i].corners, &cands[j].corners) <= neighbor_radius {
                            count += 1;
                        }
                    }
                }
            }
        }
        count
    };

    let scores: Vec<usize> = {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            (0..cands.len()).into_par_iter().map(score_one).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            (0..cands.len()).map(score_one).collect()
        }
    };

    cands
        .iter()
        .zip(scores)
        .filter_map(|(c, score)| {
            let box3d = corners_to_box(&c.corners).ok()?;
            Some(Detection {
                box3d,
                corners: c.corners,
                score,
                objectness: c.objectness,
                source_region: c.source_region,
            })
        })
        .collect()
}

/// Greedy suppression: repeatedly keep the highest-score remaining detection
/// (ties broken by objectness, then lowest source region index) and drop every
/// remaining detection whose ground-plane IoU with it exceeds
/// `overlap_threshold`. Returned in selection order.
pub fn suppress(dets: &[Detection], overlap_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .cmp(&dets[a].score)
            .then(dets[b].objectness.total_cmp(&dets[a].objectness))
            .then(dets[a].source_region.cmp(&dets[b].source_region))
    });
    let mut suppressed = vec![false; dets.len()];
    let mut kept = Vec::new();
    let footprints: Vec<[[f64; 2]; 4]> =
        dets.iter().map(|d| ground_plane_polygon(&d.box3d)).collect();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(dets[i].clone());
        for &j in &order[rank + 1..] {
            if !suppressed[j] && iou_rotated(&footprints[i], &footprints[j]) > overlap_threshold {
                suppressed[j] = true;
            }
        }
    }
    kept
}

/// Fits an oriented box to 8 corners in [`crate::voxel::box_corners`] order:
/// center from the corner mean, yaw from the mean horizontal direction of the
/// four length edges (corner pairs differing in bit 0), sizes from mean edge
/// lengths after de-rotation. Exact inverse of `box_corners` on perfect
/// cuboids, including the yaw sign (corner order carries orientation).
pub fn corners_to_box(corners: &[[f64; 3]; 8]) -> Result<OrientedBox3D, InferenceError> {
    let center = corner_mean(corners);

    // length edges: pairs (even, even|1) differ only in bit 0
    let mut dir = [0.0f64; 2];
    for base in [0, 2, 4, 6] {
        dir[0] += corners[base][0] - corners[base | 1][0];
        dir[1] += corners[base][1] - corners[base | 1][1];
    }
    let norm = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
    if norm < 1e-9 {
        return Err(InferenceError::DegenerateBox(
            "length edges have no horizontal extent".into(),
        ));
    }
    let yaw = normalize_angle(dir[1].atan2(dir[0]));

    let (s, c) = yaw.sin_cos();
    let derot = |p: &[f64; 3]| -> [f64; 3] {
        let dx = p[0] - center[0];
        let dy = p[1] - center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - center[2]]
    };
    let local: Vec<[f64; 3]> = corners.iter().map(derot).collect();
    let mut length = 0.0;
    let mut width = 0.0;
    let mut height = 0.0;
    for base in [0usize, 2, 4, 6] {
        length += (local[base][0] - local[base | 1][0]).abs();
    }
    for base in [0usize, 1, 4, 5] {
        width += (local[base][1] - local[base | 2][1]).abs();
    }
    for base in [0usize, 1, 2, 3] {
        height += (local[base][2] - local[base | 4][2]).abs();
    }
    let size = [length / 4.0, width / 4.0, height / 4.0];
    if size.iter().any(|&v| v < 1e-9 || !v.is_finite()) {
        return Err(InferenceError::DegenerateBox(format!(
            "fitted size {size:?} is not positive"
        )));
    }
    OrientedBox3D::new(center, size, yaw)
        .map_err(|e| InferenceError::DegenerateBox(e.to_string()))
}
