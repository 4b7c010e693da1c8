//! Evaluation: segmentation and depth metrics, relative pose accuracy and 3D
//! plane precision/recall.

use crate::geom::{rotation_angle, Intrinsics, LabelMap, Plane, PoseSE3, ScalarMap};
use crate::merge::Layout;
use crate::room::RoomModel;
use crate::scene::Scene;
use std::collections::BTreeMap;
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("map sizes differ: {a_w}x{a_h} vs {b_w}x{b_h}")]
    DimensionMismatch { a_w: usize, a_h: usize, b_w: usize, b_h: usize },
    #[error("segmentation has no labelled pixels")]
    EmptySegmentation,
    #[error("no pixel has valid depth in both maps")]
    NoValidDepth,
    #[error("pose lists differ in length ({pred} vs {gt}) or have fewer than two entries")]
    PoseCount { pred: usize, gt: usize },
    #[error("thresholds must be positive")]
    InvalidThresholds,
    #[error("prediction and ground truth frames do not line up: {0}")]
    FrameMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegDepthMetrics {
    /// Mean intersection-over-union of matched planes, percent.
    pub iou: f64,
    /// Pixel error, percent.
    pub pe: f64,
    /// Symmetrised mean edge-pixel distance, pixels.
    pub ee: f64,
    /// Depth RMSE over pixels valid in both maps.
    pub rmse: f64,
}

fn check_dims(aw: usize, ah: usize, bw: usize, bh: usize) -> Result<(), MetricError> {
    if (aw, ah) != (bw, bh) {
        return Err(MetricError::DimensionMismatch { a_w: aw, a_h: ah, b_w: bw, b_h: bh });
    }
    Ok(())
}

/// One-to-one label correspondence maximising total pixel overlap, ties
/// broken by summed IoU. Returns
/// `(pred label, gt label, overlap)` for pairs with positive overlap.
pub fn match_labels(pred: &LabelMap, gt: &LabelMap) -> Vec<(i32, i32, usize)> {
    let (pl, gl) = (pred.labels(), gt.labels());
    if pl.is_empty() || gl.is_empty() {
        return Vec::new();
    }
    let mut overlap = vec![vec![0usize; gl.len()]; pl.len()];
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        if p >= 0 && g >= 0 {
            let (i, j) = (pl.binary_search(&p).unwrap(), gl.binary_search(&g).unwrap());
            overlap[i][j] += 1;
        }
    }
    let count = |m: &LabelMap, l: i32| m.data.iter().filter(|&&x| x == l).count();
    let (pc, gc): (Vec<usize>, Vec<usize>) = (pl.iter().map(|&l| count(pred, l)).collect(), gl.iter().map(|&l| count(gt, l)).collect());
    let transpose = pl.len() > gl.len();
    let (rows, cols) = if transpose { (gl.len(), pl.len()) } else { (pl.len(), gl.len()) };
    // Total overlap decides; summed IoU (to 1e-6) only breaks ties.
    let tie_scale = 1_000_000 * (rows as i64 + 1);
    let w = Matrix::from_fn(rows, cols, |(r, c)| {
        let (i, j) = if transpose { (c, r) } else { (r, c) };
        let o = overlap[i][j];
        let iou = if o == 0 { 0 } else { overlap_iou_micro(o, pc[i], gc[j]) };
        o as i64 * tie_scale + iou
    });
    let (_, assign) = kuhn_munkres(&w);
    let mut out: Vec<(i32, i32, usize)> = assign
        .iter()
        .enumerate()
        .map(|(r, &c)| if transpose { (c, r) } else { (r, c) })
        .filter(|&(i, j)| overlap[i][j] > 0)
        .map(|(i, j)| (pl[i], gl[j], overlap[i][j]))
        .collect();
    out.sort_unstable();
    out
}

/// IoU of two regions in millionths, rounded.
pub fn overlap_iou_micro(inter: usize, a: usize, b: usize) -> i64 {
    (1e6 * inter as f64 / (a + b - inter) as f64).round() as i64
}

/// Pixels with a label that differs from an in-bounds 4-neighbour.
pub fn edge_pixels(labels: &LabelMap) -> Vec<bool> {
    let (w, h) = (labels.width, labels.height);
    let mut edge = vec![false; w * h];
    for r in 0..h {
        for c in 0..w {
            let l = labels.get(r, c);
            if l < 0 {
                continue;
            }
            let differs = |rr: usize, cc: usize| labels.get(rr, cc) != l;
            edge[r * w + c] = (r > 0 && differs(r - 1, c))
                || (r + 1 < h && differs(r + 1, c))
                || (c > 0 && differs(r, c - 1))
                || (c + 1 < w && differs(r, c + 1));
        }
    }
    edge
}

/// 1D squared distance transform of a sampled function (lower envelope of
/// parabolas).
fn dt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut k = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let mut first = None;
    for q in 0..n {
        if f[q].is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(q0) = first else {
        return vec![f64::INFINITY; n];
    };
    v[0] = q0;
    for q in q0 + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *dq = (q as f64 - p as f64).powi(2) + f[p];
    }
    d
}

/// Exact squared Euclidean distance from every pixel to the nearest `true`.
fn squared_distance_transform(mask: &[bool], w: usize, h: usize) -> Vec<f64> {
    let mut g = vec![0.0; w * h];
    for c in 0..w {
        let col: Vec<f64> = (0..h).map(|r| if mask[r * w + c] { 0.0 } else { f64::INFINITY }).collect();
        for (r, v) in dt_1d(&col).into_iter().enumerate() {
            g[r * w + c] = v;
        }
    }
    for r in 0..h {
        let row = dt_1d(&g[r * w..(r + 1) * w]);
        g[r * w..(r + 1) * w].copy_from_slice(&row);
    }
    g
}

fn directed_edge_error(from: &[bool], to: &[bool], w: usize, h: usize) -> f64 {
    let dt = squared_distance_transform(to, w, h);
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, &e) in from.iter().enumerate() {
        if e {
            sum += dt[i].sqrt();
            n += 1;
        }
    }
    sum / n as f64
}

/// Edge error between two label maps. No edges on either side gives 0; edges
/// on one side only give the image diagonal.
pub fn edge_error(pred: &LabelMap, gt: &LabelMap) -> f64 {
    let (w, h) = (gt.width, gt.height);
    let (pe, ge) = (edge_pixels(pred), edge_pixels(gt));
    match (pe.contains(&true), ge.contains(&true)) {
        (false, false) => 0.0,
        (true, true) => 0.5 * (directed_edge_error(&pe, &ge, w, h) + directed_edge_error(&ge, &pe, w, h)),
        _ => ((w * w + h * h) as f64).sqrt(),
    }
}

/// Depth RMSE over pixels whose depth is positive and finite in both maps.
pub fn depth_rmse(pred: &ScalarMap, gt: &ScalarMap) -> Result<f64, MetricError> {
    check_dims(pred.width, pred.height, gt.width, gt.height)?;
    let valid = |d: f64| d.is_finite() && d > 0.0;
    let (mut sum, mut n) = (0.0, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        if valid(p) && valid(g) {
            sum += (p - g).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(MetricError::NoValidDepth);
    }
    Ok((sum / n as f64).sqrt())
}

/// IoU and PE use the label matching; PE counts GT-labelled pixels whose
/// matched predicted label disagrees (unlabelled or unmatched predictions
/// count as errors).
pub fn seg_depth_metrics(
    pred_seg: &LabelMap,
    gt_seg: &LabelMap,
    pred_depth: &ScalarMap,
    gt_depth: &ScalarMap,
) -> Result<SegDepthMetrics, MetricError> {
    check_dims(pred_seg.width, pred_seg.height, gt_seg.width, gt_seg.height)?;
    check_dims(pred_depth.width, pred_depth.height, gt_seg.width, gt_seg.height)?;
    if pred_seg.labels().is_empty() || gt_seg.labels().is_empty() {
        return Err(MetricError::EmptySegmentation);
    }
    let pairs = match_labels(pred_seg, gt_seg);
    let count = |m: &LabelMap, l: i32| m.data.iter().filter(|&&x| x == l).count();
    let iou = if pairs.is_empty() {
        0.0
    } else {
        pairs
            .iter()
            .map(|&(p, g, inter)| inter as f64 / (count(pred_seg, p) + count(gt_seg, g) - inter) as f64)
            .sum::<f64>()
            / pairs.len() as f64
    };
    let mapped = |p: i32| pairs.iter().find(|m| m.0 == p).map(|m| m.1);
    let (mut wrong, mut total) = (0usize, 0usize);
    for (&p, &g) in pred_seg.data.iter().zip(&gt_seg.data) {
        if g < 0 {
            continue;
        }
        total += 1;
        if mapped(p) != Some(g) {
            wrong += 1;
        }
    }
    Ok(SegDepthMetrics {
        iou: 100.0 * iou,
        pe: 100.0 * wrong as f64 / total as f64,
        ee: edge_error(pred_seg, gt_seg),
        rmse: depth_rmse(pred_depth, gt_depth)?,
    })
}

/// Renders a room at a camera. Cameras outside the room see nothing.
pub fn reproject_room(room: &RoomModel, pose: &PoseSE3, k: &Intrinsics, width: usize, height: usize) -> (LabelMap, ScalarMap) {
    if !room.contains(&pose.center()) {
        return (LabelMap::filled(width, height, LabelMap::NONE), ScalarMap::filled(width, height, 0.0));
    }
    let (depth, labels) = room.render(pose, k, width, height);
    (labels, depth)
}

/// Plane-id and depth maps of a merged layout seen from `pose`; labels are
/// layout plane indices.
pub fn reproject_layout(layout: &Layout, pose: &PoseSE3, k: &Intrinsics, width: usize, height: usize) -> (LabelMap, ScalarMap) {
    reproject_room(&layout.room_model(), pose, k, width, height)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseErrorPair {
    pub i: usize,
    pub j: usize,
    /// Degrees.
    pub rotation_error: f64,
    /// Angle between relative translation directions, degrees.
    pub translation_angle_error: f64,
}

impl PoseErrorPair {
    pub fn max_error(&self) -> f64 {
        self.rotation_error.max(self.translation_angle_error)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseErrors {
    pub pairs: Vec<PoseErrorPair>,
    /// Ordered pairs skipped because the GT baseline is near zero.
    pub excluded: Vec<(usize, usize)>,
}

/// GT baselines shorter than this have no usable direction.
pub const MIN_BASELINE: f64 = 1e-6;

fn relative(a: &PoseSE3, b: &PoseSE3) -> PoseSE3 {
    a.inverse().compose(b)
}

/// Errors for every ordered pair `(i, j)`, comparing `T_i⁻¹ T_j`.
pub fn relative_pose_errors(pred: &[PoseSE3], gt: &[PoseSE3]) -> Result<PoseErrors, MetricError> {
    if pred.len() != gt.len() || gt.len() < 2 {
        return Err(MetricError::PoseCount { pred: pred.len(), gt: gt.len() });
    }
    let mut out = PoseErrors { pairs: Vec::new(), excluded: Vec::new() };
    for i in 0..gt.len() {
        for j in 0..gt.len() {
            if i == j {
                continue;
            }
            let (p, g) = (relative(&pred[i], &pred[j]), relative(&gt[i], &gt[j]));
            if g.translation.norm() < MIN_BASELINE {
                log::warn!("pair ({i}, {j}) has a near-zero baseline; translation error skipped");
                out.excluded.push((i, j));
                continue;
            }
            let rot = rotation_angle(&(p.rotation.transpose() * g.rotation)).to_degrees();
            let tn = p.translation.norm();
            let trans = if tn < MIN_BASELINE {
                180.0
            } else {
                p.translation.cross(&g.translation).norm().atan2(p.translation.dot(&g.translation)).to_degrees()
            };
            out.pairs.push(PoseErrorPair { i, j, rotation_error: rot, translation_angle_error: trans });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseAccuracy {
    pub rra: f64,
    pub rta: f64,
}

/// Percent of pairs with error strictly below `tau` degrees.
pub fn accuracy_at(errors: &[PoseErrorPair], tau: f64) -> PoseAccuracy {
    if errors.is_empty() {
        return PoseAccuracy { rra: 0.0, rta: 0.0 };
    }
    let pct = |f: &dyn Fn(&PoseErrorPair) -> bool| 100.0 * errors.iter().filter(|e| f(e)).count() as f64 / errors.len() as f64;
    PoseAccuracy {
        rra: pct(&|e| e.rotation_error < tau),
        rta: pct(&|e| e.translation_angle_error < tau),
    }
}

/// Area under the accuracy curve up to 30°, normalised to `[0, 1]`.
pub fn maa30(errors: &[PoseErrorPair]) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    // The accuracy curve steps up by 1/N at each pair's error, so its
    // integral over [0, 30] is the mean of (30 - min(e, 30)).
    errors.iter().map(|e| 30.0 - e.max_error().min(30.0)).sum::<f64>() / (30.0 * errors.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchThresholds {
    pub angle_deg: f64,
    pub offset_m: f64,
}

impl Default for MatchThresholds {
    fn default() -> Self {
        Self { angle_deg: 10.0, offset_m: 0.15 }
    }
}

impl MatchThresholds {
    pub fn validate(&self) -> Result<(), MetricError> {
        if self.angle_deg > 0.0 && self.offset_m > 0.0 {
            Ok(())
        } else {
            Err(MetricError::InvalidThresholds)
        }
    }
}

/// Thresholds from strict to loose.
pub const THRESHOLD_LADDER: [MatchThresholds; 4] = [
    MatchThresholds { angle_deg: 5.0, offset_m: 0.1 },
    MatchThresholds { angle_deg: 10.0, offset_m: 0.15 },
    MatchThresholds { angle_deg: 15.0, offset_m: 0.2 },
    MatchThresholds { angle_deg: 30.0, offset_m: 0.4 },
];

/// Angle (degrees) and offset difference between two planes, comparing
/// against the flipped plane when the normals point apart.
pub fn plane_difference(a: &Plane, b: &Plane) -> (f64, f64) {
    let dot = a.normal.dot(&b.normal);
    let s = if dot < 0.0 { -1.0 } else { 1.0 };
    let angle = (s * dot).clamp(-1.0, 1.0).acos().to_degrees();
    (angle, (a.offset - s * b.offset).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneMatchReport {
    pub precision: f64,
    pub recall: f64,
    /// `(pred index, gt index)` pairs.
    pub matches: Vec<(usize, usize)>,
    /// Set when either list is empty; both rates are then 0.
    pub degenerate: bool,
}

/// Match cost of a feasible pair, `None` when outside the thresholds.
pub fn match_cost(a: &Plane, b: &Plane, thr: &MatchThresholds) -> Option<f64> {
    let (angle, off) = plane_difference(a, b);
    (angle < thr.angle_deg && off < thr.offset_m).then(|| angle + off / thr.offset_m)
}

/// One-to-one matching with the most matches, ties broken by least total
/// cost.
pub fn plane_precision_recall(pred: &[Plane], gt: &[Plane], thr: &MatchThresholds) -> Result<PlaneMatchReport, MetricError> {
    thr.validate()?;
    if pred.is_empty() || gt.is_empty() {
        return Ok(PlaneMatchReport { precision: 0.0, recall: 0.0, matches: Vec::new(), degenerate: true });
    }
    // Each match is worth far more than any total cost difference, so the
    // maximum weight assignment maximises the count first.
    const MATCH: i64 = 1 << 50;
    const COST_SCALE: f64 = 1e6;
    let transpose = pred.len() > gt.len();
    let (rows, cols) = if transpose { (gt.len(), pred.len()) } else { (pred.len(), gt.len()) };
    let idx = |r: usize, c: usize| if transpose { (c, r) } else { (r, c) };
    let w = Matrix::from_fn(rows, cols, |(r, c)| {
        let (i, j) = idx(r, c);
        match_cost(&pred[i], &gt[j], thr).map_or(0, |cost| MATCH - (cost * COST_SCALE).round() as i64)
    });
    let (_, assign) = kuhn_munkres(&w);
    let mut matches: Vec<(usize, usize)> = assign
        .iter()
        .enumerate()
        .map(|(r, &c)| idx(r, c))
        .filter(|&(i, j)| match_cost(&pred[i], &gt[j], thr).is_some())
        .collect();
    matches.sort_unstable();
    let m = matches.len() as f64;
    Ok(PlaneMatchReport {
        precision: 100.0 * m / pred.len() as f64,
        recall: 100.0 * m / gt.len() as f64,
        matches,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub image_id: usize,
    pub metrics: SegDepthMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub thresholds: MatchThresholds,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Reprojection metrics at each ground-truth camera.
    pub views: Vec<ViewMetrics>,
    pub re_iou: f64,
    pub re_pe: f64,
    pub re_ee: f64,
    pub re_rmse: f64,
    pub pose_errors: PoseErrors,
    /// `(τ, accuracy)` for τ in 5, 10, 15, 30 degrees.
    pub pose_accuracy: Vec<(f64, PoseAccuracy)>,
    pub maa30: f64,
    pub planes: PlaneMatchReport,
    pub ladder: Vec<LadderRow>,
}

pub const POSE_TAUS: [f64; 4] = [5.0, 10.0, 15.0, 30.0];

/// Scores a layout and camera poses expressed in the frame of camera
/// `anchor` against a ground-truth scene. Image ids index `scene.cameras`.
pub fn evaluate(
    layout: &Layout,
    poses: &BTreeMap<usize, PoseSE3>,
    anchor: usize,
    scene: &Scene,
    thr: &MatchThresholds,
) -> Result<EvalReport, MetricError> {
    thr.validate()?;
    let cam = |i: usize| scene.cameras.get(i).ok_or_else(|| MetricError::FrameMismatch(format!("image {i} has no ground-truth camera")));
    let anchor_pred = poses.get(&anchor).ok_or_else(|| MetricError::FrameMismatch(format!("anchor image {anchor} has no predicted pose")))?;
    let to_gt = cam(anchor)?.pose.compose(&anchor_pred.inverse());
    let in_gt = layout.transformed(&to_gt);
    let room = in_gt.room_model();
    let gt_room = scene.room_model();
    let mut views = Vec::new();
    for &image_id in poses.keys() {
        let c = cam(image_id)?;
        let (pl, pd) = reproject_room(&room, &c.pose, &c.intrinsics, c.width, c.height);
        let (gl, gd) = reproject_room(&gt_room, &c.pose, &c.intrinsics, c.width, c.height);
        let metrics = match seg_depth_metrics(&pl, &gl, &pd, &gd) {
            Ok(m) => m,
            // Nothing predicted in view: worst case.
            Err(MetricError::EmptySegmentation | MetricError::NoValidDepth) => SegDepthMetrics {
                iou: 0.0,
                pe: 100.0,
                ee: ((c.width * c.width + c.height * c.height) as f64).sqrt(),
                rmse: f64::INFINITY,
            },
            Err(e) => return Err(e),
        };
        views.push(ViewMetrics { image_id, metrics });
    }
    let mean = |f: fn(&SegDepthMetrics) -> f64| views.iter().map(|v| f(&v.metrics)).sum::<f64>() / views.len().max(1) as f64;
    let ids: Vec<usize> = poses.keys().copied().collect();
    let pred: Vec<PoseSE3> = ids.iter().map(|i| poses[i]).collect();
    let gt: Vec<PoseSE3> = ids.iter().map(|&i| cam(i).map(|c| c.pose)).collect::<Result<_, _>>()?;
    let pose_errors = if ids.len() >= 2 {
        relative_pose_errors(&pred, &gt)?
    } else {
        PoseErrors { pairs: Vec::new(), excluded: Vec::new() }
    };
    let pose_accuracy = POSE_TAUS.iter().map(|&t| (t, accuracy_at(&pose_errors.pairs, t))).collect();
    let plain = in_gt.plain_planes();
    let ladder = THRESHOLD_LADDER
        .iter()
        .map(|t| {
            plane_precision_recall(&plain, &scene.planes, t).map(|r| LadderRow { thresholds: *t, precision: r.precision, recall: r.recall })
        })
        .collect::<Result<_, _>>()?;
    Ok(EvalReport {
        re_iou: mean(|m| m.iou),
        re_pe: mean(|m| m.pe),
        re_ee: mean(|m| m.ee),
        re_rmse: mean(|m| m.rmse),
        views,
        maa30: maa30(&pose_errors.pairs),
        pose_accuracy,
        pose_errors,
        planes: plane_precision_recall(&plain, &scene.planes, thr)?,
        ladder,
    })
}
