//! KITTI-style evaluation: image-plane and ground-plane overlap at a
//! configurable IoU threshold, greedy score-ranked matching with ignore
//! handling, difficulty bins, and 11-point interpolated AP / AOS.

use thiserror::Error;

use crate::inference::Detection;
use crate::io_kitti::{project_points, Calibration, ObjectLabel};
use crate::voxel::{label_to_velo_box, normalize_angle, OrientedBox3D};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("detection projects entirely behind the camera")]
    NotProjectable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    ImagePlane,
    GroundPlane,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    pub fn name(&self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
        }
    }
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::ImagePlane => "image_plane",
            Metric::GroundPlane => "ground_plane",
        }
    }
}

/// How ground truths are assigned to difficulty bins: KITTI 2D-box rules, or
/// the range thresholds standing in for them in 3D (40px ~ 28m for easy,
/// 25px ~ 47m for moderate and hard).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DifficultyMode {
    Image2d,
    Range3d,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub metric: Metric,
    pub iou_threshold: f64,
    pub difficulty: Difficulty,
    pub difficulty_mode: DifficultyMode,
}

/// Axis-aligned pixel rectangle (left, top, right, bottom).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect2D {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

impl Rect2D {
    pub fn area(&self) -> f64 {
        (self.right - self.left).max(0.0) * (self.bottom - self.top).max(0.0)
    }
}

/// Projects the detection corners and takes the min/max pixel hull, clipped to
/// the image. Corners behind the camera are dropped from the hull; with every
/// corner behind it the detection is not projectable.
pub fn image_plane_box(det: &Detection, calib: &Calibration) -> Result<Rect2D, EvalError> {
    let projected = project_points(&det.corners, calib);
    let mut any = false;
    let (mut l, mut t, mut r, mut b) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in projected {
        if p.behind_camera() {
            continue;
        }
        any = true;
        l = l.min(p.u);
        r = r.max(p.u);
        t = t.min(p.v);
        b = b.max(p.v);
    }
    if !any {
        return Err(EvalError::NotProjectable);
    }
    let (w, h) = (calib.image_size.0 as f64, calib.image_size.1 as f64);
    Ok(Rect2D {
        left: l.clamp(0.0, w),
        top: t.clamp(0.0, h),
        right: r.clamp(0.0, w),
        bottom: b.clamp(0.0, h),
    })
}

/// Orthogonal footprint of an oriented box on the ground plane,
/// counterclockwise.
pub fn ground_plane_polygon(b: &OrientedBox3D) -> [[f64; 2]; 4] {
    let (s, c) = b.yaw.sin_cos();
    let hl = b.size[0] * 0.5;
    let hw = b.size[1] * 0.5;
    let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
    local.map(|[x, y]| [b.center[0] + c * x - s * y, b.center[1] + s * x + c * y])
}

pub fn iou_axis_aligned(a: &Rect2D, b: &Rect2D) -> f64 {
    let iw = (a.right.min(b.right) - a.left.max(b.left)).max(0.0);
    let ih = (a.bottom.min(b.bottom) - a.top.max(b.top)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    acc * 0.5
}

/// Clips `subject` against one directed edge (a -> b), keeping the left side.
fn clip_edge(subject: &[[f64; 2]], a: [f64; 2], b: [f64; 2]) -> Vec<[f64; 2]> {
    let inside = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0;
    let intersect = |p: [f64; 2], q: [f64; 2]| -> [f64; 2] {
        let dx = q[0] - p[0];
        let dy = q[1] - p[1];
        let ex = b[0] - a[0];
        let ey = b[1] - a[1];
        let denom = ex * (p[1] - q[1]) - ey * (p[0] - q[0]);
        if denom.abs() < 1e-300 {
            return p;
        }
        let t = (ex * (p[1] - a[1]) - ey * (p[0] - a[0])) / denom;
        [p[0] + t * dx, p[1] + t * dy]
    };
    let mut out = Vec::with_capacity(subject.len() + 2);
    if subject.is_empty() {
        return out;
    }
    let mut prev = subject[subject.len() - 1];
    let mut prev_in = inside(prev);
    for &p in subject {
        let p_in = inside(p);
        if p_in != prev_in {
            out.push(intersect(prev, p));
        }
        if p_in {
            out.push(p);
        }
        prev = p;
        prev_in = p_in;
    }
    out
}

/// IoU of two convex counterclockwise polygons via Sutherland-Hodgman clipping
/// and the shoelace formula. Degenerate (zero-area) inputs score 0.
pub fn iou_rotated(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let area_a = polygon_area(a);
    let area_b = polygon_area(b);
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let mut clipped: Vec<[f64; 2]> = a.to_vec();
    for i in 0..b.len() {
        if clipped.is_empty() {
            break;
        }
        clipped = clip_edge(&clipped, b[i], b[(i + 1) % b.len()]);
    }
    let inter = polygon_area(&clipped).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

const EASY_MAX_RANGE_M: f64 = 28.0;
const MODERATE_MAX_RANGE_M: f64 = 47.0;
const EASY_MIN_BOX_HEIGHT_PX: f64 = 40.0;
const MODERATE_MIN_BOX_HEIGHT_PX: f64 = 25.0;

/// Easiest difficulty bin a ground truth qualifies for, or None.
pub fn difficulty_bin(gt: &ObjectLabel, mode: DifficultyMode) -> Option<Difficulty> {
    let (easy_gate, moderate_gate) = match mode {
        DifficultyMode::Image2d => {
            let h = gt.bbox_height_px();
            (h >= EASY_MIN_BOX_HEIGHT_PX, h >= MODERATE_MIN_BOX_HEIGHT_PX)
        }
        DifficultyMode::Range3d => {
            let d = (gt.location[0].powi(2) + gt.location[1].powi(2) + gt.location[2].powi(2)).sqrt();
            (d <= EASY_MAX_RANGE_M, d <= MODERATE_MAX_RANGE_M)
        }
    };
    if easy_gate && gt.occlusion <= 0 && gt.truncation <= 0.15 {
        Some(Difficulty::Easy)
    } else if moderate_gate && gt.occlusion <= 1 && gt.truncation <= 0.30 {
        Some(Difficulty::Moderate)
    } else if moderate_gate && gt.occlusion <= 2 && gt.truncation <= 0.50 {
        Some(Difficulty::Hard)
    } else {
        None
    }
}

/// Per-detection outcome of matching. Yaw delta on true positives is the
/// orientation residual modulo pi (decoded corner boxes are front/back
/// symmetric, so the half-turn ambiguity is resolved toward the matched
/// ground truth before AOS sees it).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DetOutcome {
    TruePositive { gt_index: usize, yaw_delta: f64 },
    FalsePositive,
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatch {
    pub outcomes: Vec<DetOutcome>,
    pub gt_found: Vec<bool>,
    /// Ground truths counted at this difficulty (the recall denominator).
    pub counted_gt: usize,
}

/// Classes whose ground truths never count but absorb detections.
fn is_ignore_class(class: &str) -> bool {
    crate::voxel::IGNORE_CLASSES.contains(&class)
}

enum GtShape {
    Rect(Rect2D),
    Poly([[f64; 2]; 4], f64), // footprint + velo yaw
}

/// Greedy matching in detection score order against the highest-IoU unmatched
/// counted ground truth; detections overlapping only ignored ground truths
/// (Van/Truck, harder difficulties, out-of-bin) are neither TP nor FP.
/// `dets` must be sorted by score descending.
pub fn match_detections(
    dets: &[Detection],
    gts: &[ObjectLabel],
    calib: &Calibration,
    cfg: &EvalConfig,
) -> FrameMatch {
    // counted[i]: Some(true) counted, Some(false) ignored, None unmatched-able
    let gt_status: Vec<Option<bool>> = gts
        .iter()
        .map(|gt| {
            if gt.class_name == crate::voxel::POSITIVE_CLASS {
                match difficulty_bin(gt, cfg.difficulty_mode) {
                    Some(bin) if bin <= cfg.difficulty => Some(true),
                    _ => Some(false), // harder or unbinned cars are ignored
                }
            } else if is_ignore_class(&gt.class_name) {
                Some(false)
            } else {
                None // background class: detections on it are false positives
            }
        })
        .collect();

    let gt_shapes: Vec<Option<GtShape>> = gts
        .iter()
        .zip(&gt_status)
        .map(|(gt, status)| {
            status.as_ref()?;
            match cfg.metric {
                Metric::ImagePlane => Some(GtShape::Rect(Rect2D {
                    left: gt.bbox2d[0],
                    top: gt.bbox2d[1],
                    right: gt.bbox2d[2],
                    bottom: gt.bbox2d[3],
                })),
                Metric::GroundPlane => label_to_velo_box(gt, calib)
                    .ok()
                    .map(|b| GtShape::Poly(ground_plane_polygon(&b), b.yaw)),
            }
        })
        .collect();

    let mut gt_matched = vec![false; gts.len()];
    let mut outcomes = Vec::with_capacity(dets.len());
    for det in dets {
        let det_shape: Result<GtShape, EvalError> = match cfg.metric {
            Metric::ImagePlane => image_plane_box(det, calib).map(GtShape::Rect),
            Metric::GroundPlane => Ok(GtShape::Poly(
                ground_plane_polygon(&det.box3d),
                det.box3d.yaw,
            )),
        };
        let det_shape = match det_shape {
            Ok(s) => s,
            Err(_) => {
                // not projectable: claims an object nowhere visible
                outcomes.push(DetOutcome::FalsePositive);
                continue;
            }
        };
        let iou_with = |g: &GtShape| -> f64 {
            match (&det_shape, g) {
                (GtShape::Rect(a), GtShape::Rect(b)) => iou_axis_aligned(a, b),
                (GtShape::Poly(a, _), GtShape::Poly(b, _)) => iou_rotated(a, b),
                _ => 0.0,
            }
        };

        // best unmatched counted ground truth first
        let mut best: Option<(usize, f64)> = None;
        for (gi, shape) in gt_shapes.iter().enumerate() {
            let (Some(shape), Some(true)) = (shape, gt_status[gi]) else {
                continue;
            };
            if gt_matched[gi] {
                continue;
            }
            let iou = iou_with(shape);
            if iou > cfg.iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            gt_matched[gi] = true;
            let det_yaw = match det_shape {
                GtShape::Poly(_, yaw) => yaw,
                GtShape::Rect(_) => det.box3d.yaw,
            };
            let gt_yaw = match &gt_shapes[gi] {
                Some(GtShape::Poly(_, yaw)) => *yaw,
                // image-plane metric still scores orientation in the sensor frame
                _ => label_to_velo_box(&gts[gi], calib).map(|b| b.yaw).unwrap_or(det_yaw),
            };
            let mut delta = normalize_angle(det_yaw - gt_yaw);
            if delta > std::f64::consts::FRAC_PI_2 {
                delta -= std::f64::consts::PI;
            } else if delta < -std::f64::consts::FRAC_PI_2 {
                delta += std::f64::consts::PI;
            }
            outcomes.push(DetOutcome::TruePositive {
                gt_index: gi,
                yaw_delta: delta,
            });
            continue;
        }

        // any ignored ground truth absorbing this detection?
        let absorbed = gt_shapes.iter().enumerate().any(|(gi, shape)| {
            matches!(gt_status[gi], Some(false))
                && shape.as_ref().map_or(false, |s| iou_with(s) > cfg.iou_threshold)
        });
        outcomes.push(if absorbed {
            DetOutcome::Ignored
        } else {
            DetOutcome::FalsePositive
        });
    }

    FrameMatch {
        gt_found: gt_matched,
        counted_gt: gt_status.iter().filter(|s| **s == Some(true)).count(),
        outcomes,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    /// (recall, precision) at each non-ignored detection, recall non-decreasing.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
    pub aos: f64,
}

/// KITTI 11-point interpolated AP over pooled, score-ranked outcomes. AOS
/// replaces each true positive's unit contribution with (1 + cos dyaw) / 2
/// under the same interpolation. `total_gt` is the counted ground-truth total.
pub fn average_precision(ranked: &[(f64, DetOutcome)], total_gt: usize) -> PrCurve {
    let mut order: Vec<usize> = (0..ranked.len()).collect();
    order.sort_by(|&a, &b| ranked[b].0.total_cmp(&ranked[a].0));

    let mut points = Vec::new();
    let mut sim_points = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut sim_sum = 0.0f64;
    for &i in &order {
        match ranked[i].1 {
            DetOutcome::TruePositive { yaw_delta, .. } => {
                tp += 1;
                sim_sum += 0.5 * (1.0 + yaw_delta.cos());
            }
            DetOutcome::FalsePositive => fp += 1,
            DetOutcome::Ignored => continue,
        }
        let denom = (tp + fp) as f64;
        let recall = if total_gt == 0 {
            0.0
        } else {
            tp as f64 / total_gt as f64
        };
        points.push((recall, tp as f64 / denom));
        sim_points.push((recall, sim_sum / denom));
    }

    if total_gt == 0 {
        // vacuous frame set: perfect when nothing was claimed, zero otherwise
        let clean = points.is_empty();
        let v = if clean { 1.0 } else { 0.0 };
        return PrCurve {
            points,
            ap: v,
            aos: v,
        };
    }

    let eleven_point = |pts: &[(f64, f64)]| -> f64 {
        let mut acc = 0.0;
        for level in 0..=10 {
            let r = level as f64 / 10.0;
            let best = pts
                .iter()
                .filter(|(recall, _)| *recall >= r - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0f64, f64::max);
            acc += best;
        }
        acc / 11.0
    };

    PrCurve {
        ap: eleven_point(&points),
        aos: eleven_point(&sim_points),
        points,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::corners_to_box;
    use crate::voxel::box_corners;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn identical_rects_have_iou_one() {
        let r = Rect2D {
            left: 10.0,
            top: 20.0,
            right: 50.0,
            bottom: 60.0,
        };
        assert_eq!(iou_axis_aligned(&r, &r), 1.0);
    }

    #[test]
    fn disjoint_rects_have_iou_zero() {
        let a = Rect2D { left: 0.0, top: 0.0, right: 1.0, bottom: 1.0 };
        let b = Rect2D { left: 5.0, top: 5.0, right: 6.0, bottom: 6.0 };
        assert_eq!(iou_axis_aligned(&a, &b), 0.0);
    }

    #[test]
    fn half_offset_unit_squares() {
        let a = Rect2D { left: 0.0, top: 0.0, right: 1.0, bottom: 1.0 };
        let b = Rect2D { left: 0.5, top: 0.0, right: 1.5, bottom: 1.0 };
        assert!((iou_axis_aligned(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    fn unit_square() -> [[f64; 2]; 4] {
        [[0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]]
    }

    #[test]
    fn rotated_iou_identity_and_disjoint() {
        let sq = unit_square();
        assert!((iou_rotated(&sq, &sq) - 1.0).abs() < 1e-12);
        let far: Vec<[f64; 2]> = sq.iter().map(|[x, y]| [x + 10.0, *y]).collect();
        assert_eq!(iou_rotated(&sq, &far), 0.0);
    }

    #[test]
    fn degenerate_polygon_scores_zero() {
        let line = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]];
        assert_eq!(iou_rotated(&line, &unit_square()), 0.0);
    }

    #[test]
    fn square_vs_rotated_square_analytic() {
        // unit square vs itself rotated 45 degrees: intersection is a regular
        // octagon with area 2*(sqrt(2)-1), union 2 - that
        let sq = unit_square();
        let rot: Vec<[f64; 2]> = sq
            .iter()
            .map(|[x, y]| {
                let (s, c) = (PI / 4.0).sin_cos();
                [c * x - s * y, s * x + c * y]
            })
            .collect();
        let inter = 2.0 * (2.0f64.sqrt() - 1.0);
        let expect = inter / (2.0 - inter);
        assert!((iou_rotated(&sq, &rot) - expect).abs() < 1e-9);
    }

    #[test]
    fn rotated_matches_axis_aligned_on_rectangles() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let (l0, t0) = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let (w0, h0) = (rng.gen_range(0.5..4.0), rng.gen_range(0.5..4.0));
            let (l1, t1) = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let (w1, h1) = (rng.gen_range(0.5..4.0), rng.gen_range(0.5..4.0));
            let ra = Rect2D { left: l0, top: t0, right: l0 + w0, bottom: t0 + h0 };
            let rb = Rect2D { left: l1, top: t1, right: l1 + w1, bottom: t1 + h1 };
            // counterclockwise in (x, y) with y increasing "up"
            let pa = [[ra.right, ra.bottom], [ra.left, ra.bottom], [ra.left, ra.top], [ra.right, ra.top]];
            let pb = [[rb.right, rb.bottom], [rb.left, rb.bottom], [rb.left, rb.top], [rb.right, rb.top]];
            let away = (iou_rotated(&pa, &pb) - iou_axis_aligned(&ra, &rb)).abs();
            assert!(away < 1e-9, "difference {away}");
        }
    }

    #[test]
    fn iou_rotated_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..100 {
            let mk = |rng: &mut ChaCha8Rng| {
                let b = OrientedBox3D::new(
                    [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), 0.0],
                    [rng.gen_range(1.0..4.0), rng.gen_range(1.0..3.0), 1.0],
                    rng.gen_range(-PI..PI),
                )
                .unwrap();
                ground_plane_polygon(&b)
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            assert!((iou_rotated(&a, &b) - iou_rotated(&b, &a)).abs() < 1e-12);
            assert!((iou_rotated(&a, &a) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn footprint_of_unit_box_is_unit_square() {
        let b = OrientedBox3D::new([0.0; 3], [1.0, 1.0, 1.0], 0.0).unwrap();
        assert_eq!(ground_plane_polygon(&b), unit_square());
    }

    #[test]
    fn footprint_quarter_turn_swaps_extents() {
        let b = OrientedBox3D::new([0.0; 3], [4.0, 2.0, 1.0], FRAC_PI_2).unwrap();
        let poly = ground_plane_polygon(&b);
        let xs: Vec<f64> = poly.iter().map(|p| p[0]).collect();
        let ys: Vec<f64> = poly.iter().map(|p| p[1]).collect();
        let span = |v: &[f64]| v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
        assert!((span(&xs) - 2.0).abs() < 1e-12);
        assert!((span(&ys) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn footprint_matches_rotation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..50 {
            let b = OrientedBox3D::new(
                [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), 0.3],
                [rng.gen_range(2.0..5.0), rng.gen_range(1.0..2.5), 1.5],
                rng.gen_range(-PI..PI),
            )
            .unwrap();
            let poly = ground_plane_polygon(&b);
            let corners = box_corners(&b);
            // footprint = unique (x, y) of the top-half corners in matching order
            for (pi, ci) in [(0usize, 0usize), (1, 1), (2, 3), (3, 2)] {
                assert!((poly[pi][0] - corners[ci][0]).abs() < 1e-12);
                assert!((poly[pi][1] - corners[ci][1]).abs() < 1e-12);
            }
            assert!(polygon_area(&poly) > 0.0, "counterclockwise footprint");
        }
    }

    fn gt(class: &str, dist: f64, occ: i32, trunc: f64) -> ObjectLabel {
        ObjectLabel {
            class_name: class.into(),
            truncation: trunc,
            occlusion: occ,
            alpha: 0.0,
            bbox2d: [100.0, 100.0, 150.0, 140.0],
            size: [1.5, 1.8, 4.0],
            location: [0.0, 1.0, dist],
            yaw: 0.0,
        }
    }

    #[test]
    fn range_bins_follow_the_distance_thresholds() {
        assert_eq!(
            difficulty_bin(&gt("Car", 20.0, 0, 0.0), DifficultyMode::Range3d),
            Some(Difficulty::Easy)
        );
        assert_eq!(
            difficulty_bin(&gt("Car", 40.0, 1, 0.0), DifficultyMode::Range3d),
            Some(Difficulty::Moderate)
        );
        assert_eq!(
            difficulty_bin(&gt("Car", 60.0, 0, 0.0), DifficultyMode::Range3d),
            None
        );
        assert_eq!(
            difficulty_bin(&gt("Car", 40.0, 2, 0.4), DifficultyMode::Range3d),
            Some(Difficulty::Hard)
        );
    }

    #[test]
    fn image_bins_follow_box_height() {
        let mut tall = gt("Car", 10.0, 0, 0.0);
        tall.bbox2d = [0.0, 0.0, 60.0, 45.0];
        assert_eq!(difficulty_bin(&tall, DifficultyMode::Image2d), Some(Difficulty::Easy));
        let mut mid = gt("Car", 10.0, 0, 0.0);
        mid.bbox2d = [0.0, 0.0, 40.0, 30.0];
        assert_eq!(difficulty_bin(&mid, DifficultyMode::Image2d), Some(Difficulty::Moderate));
        let mut small = gt("Car", 10.0, 0, 0.0);
        small.bbox2d = [0.0, 0.0, 20.0, 20.0];
        assert_eq!(difficulty_bin(&small, DifficultyMode::Image2d), None);
    }

    fn sensor_aligned_calib() -> Calibration {
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

    fn det_from_velo_box(b: &OrientedBox3D, score: usize) -> Detection {
        Detection {
            box3d: *b,
            corners: box_corners(b),
            score,
            objectness: 0.9,
            source_region: [0, 0, 0],
        }
    }

    fn gt_from_velo_box(b: &OrientedBox3D, class: &str, calib: &Calibration) -> ObjectLabel {
        let (location, ry) = crate::voxel::velo_box_to_label_pose(b, calib);
        ObjectLabel {
            class_name: class.into(),
            truncation: 0.0,
            occlusion: 0,
            alpha: 0.0,
            bbox2d: [100.0, 100.0, 200.0, 180.0],
            size: [b.height(), b.width(), b.length()],
            location,
            yaw: ry,
        }
    }

    fn ground_cfg() -> EvalConfig {
        EvalConfig {
            metric: Metric::GroundPlane,
            iou_threshold: 0.7,
            difficulty: Difficulty::Moderate,
            difficulty_mode: DifficultyMode::Range3d,
        }
    }

    #[test]
    fn exact_match_is_true_positive() {
        let calib = sensor_aligned_calib();
        let b = OrientedBox3D::new([8.0, 1.0, -1.0], [4.0, 1.8, 1.5], 0.4).unwrap();
        let m = match_detections(
            &[det_from_velo_box(&b, 5)],
            &[gt_from_velo_box(&b, "Car", &calib)],
            &calib,
            &ground_cfg(),
        );
        assert_eq!(m.counted_gt, 1);
        assert!(matches!(m.outcomes[0], DetOutcome::TruePositive { .. }));
        if let DetOutcome::TruePositive { yaw_delta, .. } = m.outcomes[0] {
            assert!(yaw_delta.abs() < 1e-9);
        }
        assert_eq!(m.gt_found, vec![true]);
    }

    #[test]
    fn detection_on_van_is_ignored() {
        let calib = sensor_aligned_calib();
        let b = OrientedBox3D::new([8.0, 1.0, -1.0], [4.5, 1.9, 1.9], 0.0).unwrap();
        let m = match_detections(
            &[det_from_velo_box(&b, 5)],
            &[gt_from_velo_box(&b, "Van", &calib)],
            &calib,
            &ground_cfg(),
        );
        assert_eq!(m.counted_gt, 0);
        assert_eq!(m.outcomes[0], DetOutcome::Ignored);
    }

    #[test]
    fn unmatched_detection_is_false_positive() {
        let calib = sensor_aligned_calib();
        let b = OrientedBox3D::new([8.0, 1.0, -1.0], [4.0, 1.8, 1.5], 0.0).unwrap();
        let far = OrientedBox3D::new([20.0, -5.0, -1.0], [4.0, 1.8, 1.5], 0.0).unwrap();
        let m = match_detections(
            &[det_from_velo_box(&far, 5)],
            &[gt_from_velo_box(&b, "Car", &calib)],
            &calib,
            &ground_cfg(),
        );
        assert_eq!(m.outcomes[0], DetOutcome::FalsePositive);
        assert_eq!(m.gt_found, vec![false]);
    }

    #[test]
    fn matching_agrees_with_exhaustive_oracle() {
        let calib = sensor_aligned_calib();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let cfg = ground_cfg();
        for _ in 0..30 {
            let gts: Vec<(OrientedBox3D, ObjectLabel)> = (0..3)
                .map(|i| {
                    let b = OrientedBox3D::new(
                        [6.0 + 6.0 * i as f64, rng.gen_range(-4.0..4.0), -1.0],
                        [4.0, 1.8, 1.5],
                        rng.gen_range(-PI..PI),
                    )
                    .unwrap();
                    let l = gt_from_velo_box(&b, "Car", &calib);
                    (b, l)
                })
                .collect();
            // five detections: jittered copies of ground truths plus noise boxes
            let mut dets: Vec<Detection> = Vec::new();
            for i in 0..5 {
                let base = &gts[i % 3].0;
                let jitter = rng.gen_range(-0.15..0.15);
                let b = OrientedBox3D::new(
                    [base.center[0] + jitter, base.center[1] - jitter, base.center[2]],
                    base.size,
                    base.yaw,
                )
                .unwrap();
                dets.push(det_from_velo_box(&b, 10 - i));
            }
            let labels: Vec<ObjectLabel> = gts.iter().map(|(_, l)| l.clone()).collect();
            let got = match_detections(&dets, &labels, &calib, &cfg);

            // oracle: same greedy semantics, written independently over the IoU matrix
            let gt_polys: Vec<_> = gts.iter().map(|(b, _)| ground_plane_polygon(b)).collect();
            let mut taken = vec![false; gts.len()];
            for (di, det) in dets.iter().enumerate() {
                let dp = ground_plane_polygon(&det.box3d);
                let mut best = None;
                let mut best_iou = cfg.iou_threshold;
                for (gi, gp) in gt_polys.iter().enumerate() {
                    if taken[gi] {
                        continue;
                    }
                    let iou = iou_rotated(&dp, gp);
                    if iou > best_iou {
                        best_iou = iou;
                        best = Some(gi);
                    }
                }
                match (best, &got.outcomes[di]) {
                    (Some(gi), DetOutcome::TruePositive { gt_index, .. }) => {
                        taken[gi] = true;
                        assert_eq!(*gt_index, gi);
                    }
                    (None, DetOutcome::FalsePositive) => {}
                    (oracle, got) => panic!("oracle {oracle:?} vs got {got:?}"),
                }
            }
        }
    }

    #[test]
    fn tp_count_bounded_by_sets() {
        let calib = sensor_aligned_calib();
        let b = OrientedBox3D::new([8.0, 1.0, -1.0], [4.0, 1.8, 1.5], 0.0).unwrap();
        let dets = vec![det_from_velo_box(&b, 5), det_from_velo_box(&b, 4)];
        let m = match_detections(
            &dets,
            &[gt_from_velo_box(&b, "Car", &calib)],
            &calib,
            &ground_cfg(),
        );
        let tps = m
            .outcomes
            .iter()
            .filter(|o| matches!(o, DetOutcome::TruePositive { .. }))
            .count();
        assert_eq!(tps, 1); // one-to-one matching
    }

    #[test]
    fn perfect_ranked_list_has_ap_one() {
        let ranked: Vec<(f64, DetOutcome)> = (0..5)
            .map(|i| {
                (
                    1.0 - i as f64 * 0.1,
                    DetOutcome::TruePositive {
                        gt_index: i,
                        yaw_delta: 0.0,
                    },
                )
            })
            .collect();
        let curve = average_precision(&ranked, 5);
        assert_eq!(curve.ap, 1.0);
        assert_eq!(curve.aos, 1.0);
    }

    #[test]
    fn pi_yaw_errors_zero_aos_but_not_ap() {
        let ranked: Vec<(f64, DetOutcome)> = (0..4)
            .map(|i| {
                (
                    1.0 - i as f64 * 0.1,
                    DetOutcome::TruePositive {
                        gt_index: i,
                        yaw_delta: PI,
                    },
                )
            })
            .collect();
        let curve = average_precision(&ranked, 4);
        assert_eq!(curve.ap, 1.0);
        assert!(curve.aos.abs() < 1e-12);
    }

    #[test]
    fn six_detection_fixture_matches_hand_computed_ap() {
        // ranked outcomes: TP FP TP FP TP TP with 5 ground truths
        // hand computation: precisions 1, 1/2, 2/3, 1/2, 3/5, 2/3 at recalls
        // .2 .2 .4 .4 .6 .8; 11-point AP = (3*1 + 6*(2/3)) / 11 = 7/11
        let outcomes = [
            DetOutcome::TruePositive { gt_index: 0, yaw_delta: 0.0 },
            DetOutcome::FalsePositive,
            DetOutcome::TruePositive { gt_index: 1, yaw_delta: 0.0 },
            DetOutcome::FalsePositive,
            DetOutcome::TruePositive { gt_index: 2, yaw_delta: 0.0 },
            DetOutcome::TruePositive { gt_index: 3, yaw_delta: 0.0 },
        ];
        let ranked: Vec<(f64, DetOutcome)> = outcomes
            .iter()
            .enumerate()
            .map(|(i, o)| (1.0 - 0.1 * i as f64, *o))
            .collect();
        let curve = average_precision(&ranked, 5);
        assert!((curve.ap - 7.0 / 11.0).abs() < 1e-12, "ap {}", curve.ap);
        assert_eq!(curve.aos, curve.ap); // zero yaw errors
    }

    #[test]
    fn aos_never_exceeds_ap() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for _ in 0..50 {
            let n = rng.gen_range(1..20);
            let ranked: Vec<(f64, DetOutcome)> = (0..n)
                .map(|i| {
                    let o = match rng.gen_range(0..3) {
                        0 => DetOutcome::TruePositive {
                            gt_index: i,
                            yaw_delta: rng.gen_range(-PI..PI),
                        },
                        1 => DetOutcome::FalsePositive,
                        _ => DetOutcome::Ignored,
                    };
                    (rng.gen_range(0.0..1.0), o)
                })
                .collect();
            let curve = average_precision(&ranked, 8);
            assert!(curve.aos <= curve.ap + 1e-12);
            assert!(curve.ap <= 1.0 && curve.aos >= 0.0);
            for w in curve.points.windows(2) {
                assert!(w[1].0 >= w[0].0, "recalls must be non-decreasing");
            }
        }
    }

    #[test]
    fn empty_detections_give_zero_ap() {
        let curve = average_precision(&[], 5);
        assert_eq!(curve.ap, 0.0);
    }

    #[test]
    fn image_plane_box_is_symmetric_for_centered_box() {
        let calib = sensor_aligned_calib();
        // box straight ahead on the optical axis
        let b = OrientedBox3D::new([10.0, 0.0, 0.0], [4.0, 1.8, 1.5], 0.0).unwrap();
        let det = det_from_velo_box(&b, 1);
        let rect = image_plane_box(&det, &calib).unwrap();
        let cx = 621.0;
        assert!((cx - rect.left - (rect.right - cx)).abs() < 1e-6);
    }

    #[test]
    fn box_behind_camera_is_not_projectable() {
        let calib = sensor_aligned_calib();
        let b = OrientedBox3D::new([-10.0, 0.0, 0.0], [4.0, 1.8, 1.5], 0.0).unwrap();
        let det = det_from_velo_box(&b, 1);
        assert!(matches!(
            image_plane_box(&det, &calib),
            Err(EvalError::NotProjectable)
        ));
    }

    #[test]
    fn hull_matches_per_corner_projection_oracle() {
        let calib = sensor_aligned_calib();
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..50 {
            let b = OrientedBox3D::new(
                [rng.gen_range(6.0..30.0), rng.gen_range(-8.0..8.0), rng.gen_range(-1.5..0.5)],
                [4.0, 1.8, 1.5],
                rng.gen_range(-PI..PI),
            )
            .unwrap();
            let det = det_from_velo_box(&b, 1);
            let rect = image_plane_box(&det, &calib).unwrap();
            let projected = project_points(&det.corners, &calib);
            let us: Vec<f64> = projected.iter().map(|p| p.u).collect();
            let vs: Vec<f64> = projected.iter().map(|p| p.v).collect();
            let min = |v: &[f64]| v.iter().cloned().fold(f64::MAX, f64::min);
            let max = |v: &[f64]| v.iter().cloned().fold(f64::MIN, f64::max);
            assert!((rect.left - min(&us).clamp(0.0, 1242.0)).abs() < 1e-9);
            assert!((rect.right - max(&us).clamp(0.0, 1242.0)).abs() < 1e-9);
            assert!((rect.top - min(&vs).clamp(0.0, 375.0)).abs() < 1e-9);
            assert!((rect.bottom - max(&vs).clamp(0.0, 375.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn corners_to_box_yaw_feeds_aos_with_mod_pi_resolution() {
        // a detection whose corner order encodes yaw + pi still matches with
        // zero orientation residual after the half-turn resolution
        let calib = sensor_aligned_calib();
        let b = OrientedBox3D::new([8.0, 1.0, -1.0], [4.0, 1.8, 1.5], 0.3).unwrap();
        let flipped = OrientedBox3D::new(b.center, b.size, b.yaw + PI).unwrap();
        let det = det_from_velo_box(&flipped, 5);
        let fit = corners_to_box(&det.corners).unwrap();
        assert!(normalize_angle(fit.yaw - flipped.yaw).abs() < 1e-9);
        let m = match_detections(
            &[det],
            &[gt_from_velo_box(&b, "Car", &calib)],
            &calib,
            &ground_cfg(),
        );
        match m.outcomes[0] {
            DetOutcome::TruePositive { yaw_delta, .. } => assert!(yaw_delta.abs() < 1e-9),
            other => panic!("expected TP, got {other:?}"),
        }
    }
}
