//! Multi-view merging of partial layouts.
//!
//! Partial layouts are moved to the world frame, floor and ceiling are
//! averaged, walls become 2D segments on the floor plane, the segments are
//! rotated and snapped to two perpendicular axes, and a greedy clustering
//! fuses segments that observe the same wall.

use crate::geom::{horizontal_basis, transform_plane, GeomError, Plane, PoseSE3, SemanticClass, Vec2, Vec3};
use crate::room::{RoomModel, WallFace};
use crate::single_view::{lines_and_junctions, PartialLayout, PlaneJunction, PlaneLine};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MergeError {
    #[error("no view observed a floor")]
    MissingFloor,
    #[error("no view observed a ceiling")]
    MissingCeiling,
    #[error("no transform for image {0}")]
    MissingTransform(usize),
    #[error("merge parameter {0} must be positive")]
    InvalidParams(&'static str),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeParams {
    /// Metres.
    pub proximity_threshold: f64,
    /// Fraction of the shorter extent.
    pub overlap_threshold: f64,
    /// Metres.
    pub margin: f64,
    /// Degrees.
    pub angle_snap_tol: f64,
}

impl Default for MergeParams {
    fn default() -> Self {
        Self {
            proximity_threshold: 0.2,
            overlap_threshold: 0.3,
            margin: 0.1,
            angle_snap_tol: 15.0,
        }
    }
}

impl MergeParams {
    pub fn validate(&self) -> Result<(), MergeError> {
        for (name, v) in [
            ("proximity_threshold", self.proximity_threshold),
            ("overlap_threshold", self.overlap_threshold),
            ("margin", self.margin),
            ("angle_snap_tol", self.angle_snap_tol),
        ] {
            if !(v > 0.0) {
                return Err(MergeError::InvalidParams(name));
            }
        }
        Ok(())
    }
}

/// Camera-to-world similarity `x ↦ scale · (R x + t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewTransform {
    pub image_id: usize,
    pub scale: f64,
    pub pose: PoseSE3,
}

impl ViewTransform {
    pub fn point(&self, x: &Vec3) -> Vec3 {
        self.pose.transform_point(x) * self.scale
    }

    pub fn plane(&self, p: &Plane) -> Plane {
        let q = transform_plane(p, &self.pose);
        Plane {
            offset: q.offset * self.scale,
            ..q
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// Constant x.
    Vertical,
    /// Constant z.
    Horizontal,
    Unclassified,
}

/// A wall seen in one image, as a segment on the floor plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WallSegment2D {
    pub a: Vec2,
    pub b: Vec2,
    pub image_id: usize,
    /// Index into that image's `PartialLayout::planes`.
    pub source_plane_index: usize,
    pub orientation: Orientation,
    /// Unit normal pointing to the side the camera saw.
    pub normal: Vec2,
}

impl WallSegment2D {
    pub fn length(&self) -> f64 {
        (self.b - self.a).norm()
    }

    pub fn midpoint(&self) -> Vec2 {
        (self.a + self.b) / 2.0
    }

    /// Direction angle of `b − a`.
    pub fn angle(&self) -> f64 {
        let d = self.b - self.a;
        d.y.atan2(d.x)
    }

    /// Coordinate across the segment's axis (x for vertical, z otherwise).
    pub fn perp(&self) -> f64 {
        match self.orientation {
            Orientation::Vertical => self.midpoint().x,
            _ => self.midpoint().y,
        }
    }

    /// Extent along the segment's axis.
    pub fn along(&self) -> (f64, f64) {
        let (p, q) = match self.orientation {
            Orientation::Vertical => (self.a.y, self.b.y),
            _ => (self.a.x, self.b.x),
        };
        (p.min(q), p.max(q))
    }
}

fn rotate(p: &Vec2, angle: f64) -> Vec2 {
    let (s, c) = angle.sin_cos();
    Vec2::new(c * p.x - s * p.y, s * p.x + c * p.y)
}

fn transform_for(transforms: &[ViewTransform], image_id: usize) -> Result<&ViewTransform, MergeError> {
    transforms
        .iter()
        .find(|t| t.image_id == image_id)
        .ok_or(MergeError::MissingTransform(image_id))
}

/// Mean of the world-frame floor and ceiling planes over all views, with
/// normals renormalised. The floor normal points toward the ceiling.
pub fn average_floor_ceiling(
    partials: &[PartialLayout],
    transforms: &[ViewTransform],
) -> Result<(Plane, Plane), MergeError> {
    let mut acc = [(Vec3::zeros(), 0.0, 0usize); 2];
    for p in partials {
        let t = transform_for(transforms, p.image_id)?;
        for (slot, lp) in [p.floor(), p.ceiling()].into_iter().enumerate() {
            if let Some(lp) = lp {
                let w = t.plane(&lp.plane);
                acc[slot].0 += w.normal;
                acc[slot].1 += w.offset;
                acc[slot].2 += 1;
            }
        }
    }
    if acc[0].2 == 0 {
        return Err(MergeError::MissingFloor);
    }
    if acc[1].2 == 0 {
        return Err(MergeError::MissingCeiling);
    }
    // `Plane::new` rescales the mean offset along with the mean normal.
    let mean = |(n, d, k): (Vec3, f64, usize), class| Plane::new(n / k as f64, d / k as f64, class);
    let floor = mean(acc[0], SemanticClass::Floor)?;
    let ceiling = mean(acc[1], SemanticClass::Ceiling)?;
    Ok((floor, ceiling))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MergeWarning {
    DegenerateWall { image_id: usize, plane_index: usize },
    NoWalls,
    OpenFootprint,
}

/// Floor-plane segments for every wall of every view. `(e_x, e_z)` come from
/// [`horizontal_basis`] of the floor normal; endpoints are the extreme hull
/// points along the wall direction, placed on the wall's fitted line.
pub fn project_walls(
    partials: &[PartialLayout],
    transforms: &[ViewTransform],
    floor: &Plane,
) -> Result<(Vec<WallSegment2D>, Vec<MergeWarning>), MergeError> {
    let up = floor.normal;
    let (ex, ez) = horizontal_basis(&up);
    let mut segments = Vec::new();
    let mut warnings = Vec::new();
    for p in partials {
        let t = transform_for(transforms, p.image_id)?;
        for (k, lp) in p.planes.iter().enumerate() {
            if lp.plane.class != SemanticClass::Wall {
                continue;
            }
            let w = t.plane(&lp.plane);
            let n2 = Vec2::new(w.normal.dot(&ex), w.normal.dot(&ez));
            // A wall within 30° of horizontal cannot be drawn as a segment.
            if n2.norm() < 0.5 || lp.hull.len() < 2 {
                warnings.push(MergeWarning::DegenerateWall {
                    image_id: p.image_id,
                    plane_index: k,
                });
                continue;
            }
            let n2 = n2.normalize();
            let dir = Vec2::new(-n2.y, n2.x);
            let pts: Vec<Vec2> = lp
                .hull
                .iter()
                .map(|x| {
                    let xw = t.point(x);
                    Vec2::new(xw.dot(&ex), xw.dot(&ez))
                })
                .collect();
            let c = pts.iter().map(|q| q.dot(&n2)).sum::<f64>() / pts.len() as f64;
            let (lo, hi) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), q| {
                let s = q.dot(&dir);
                (lo.min(s), hi.max(s))
            });
            if !(hi > lo) {
                warnings.push(MergeWarning::DegenerateWall {
                    image_id: p.image_id,
                    plane_index: k,
                });
                continue;
            }
            segments.push(WallSegment2D {
                a: n2 * c + dir * lo,
                b: n2 * c + dir * hi,
                image_id: p.image_id,
                source_plane_index: k,
                orientation: Orientation::Unclassified,
                normal: n2,
            });
        }
    }
    Ok((segments, warnings))
}

/// `Σ w_i · |wrap(4(α_i − θ))|`, the length-weighted circular distance of
/// every segment angle to the nearest axis of a frame rotated by `θ`.
pub fn rotation_cost(segments: &[WallSegment2D], theta: f64) -> f64 {
    segments
        .iter()
        .map(|s| {
            let x = (4.0 * (s.angle() - theta)).rem_euclid(2.0 * PI);
            s.length() * x.min(2.0 * PI - x)
        })
        .sum()
}

/// Minimiser of [`rotation_cost`] over `[0, π/2)`. The cost is piecewise linear
/// and concave between data angles, so the optimum is one of the folded
/// segment angles; ties go to the smallest angle.
pub fn estimate_scene_rotation(segments: &[WallSegment2D]) -> f64 {
    let mut candidates: Vec<f64> = segments
        .iter()
        .map(|s| {
            let t = s.angle().rem_euclid(FRAC_PI_2);
            if t >= FRAC_PI_2 {
                0.0
            } else {
                t
            }
        })
        .collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best = (f64::INFINITY, 0.0);
    for t in candidates {
        let c = rotation_cost(segments, t);
        if c < best.0 {
            best = (c, t);
        }
    }
    best.1
}

/// Rotates segments by `−θ` into the scene frame, classifies each by its
/// folded angle and snaps classified segments to the exact axis about their
/// midpoint. Normals are snapped to the matching signed axis.
pub fn snap_axis(segments: &[WallSegment2D], theta: f64, params: &MergeParams) -> Vec<WallSegment2D> {
    let tol = params.angle_snap_tol.to_radians();
    segments
        .iter()
        .map(|s| {
            let a = rotate(&s.a, -theta);
            let b = rotate(&s.b, -theta);
            let normal = rotate(&s.normal, -theta);
            let phi = (b - a).y.atan2((b - a).x).rem_euclid(PI);
            let to_horizontal = phi.min(PI - phi);
            let to_vertical = (phi - FRAC_PI_2).abs();
            let mid = (a + b) / 2.0;
            let half = (b - a).norm() / 2.0;
            let (orientation, a, b, normal) = if to_horizontal < tol && to_horizontal <= to_vertical {
                (
                    Orientation::Horizontal,
                    Vec2::new(mid.x - half, mid.y),
                    Vec2::new(mid.x + half, mid.y),
                    Vec2::new(0.0, normal.y.signum()),
                )
            } else if to_vertical < tol {
                (
                    Orientation::Vertical,
                    Vec2::new(mid.x, mid.y - half),
                    Vec2::new(mid.x, mid.y + half),
                    Vec2::new(normal.x.signum(), 0.0),
                )
            } else {
                (Orientation::Unclassified, a, b, normal)
            };
            WallSegment2D {
                a,
                b,
                orientation,
                normal,
                ..*s
            }
        })
        .collect()
}

/// A group of segments taken to observe one wall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub orientation: Orientation,
    /// Indices into the segment list given to [`merge_planes`].
    pub members: Vec<usize>,
    /// Length-weighted mean cross-axis coordinate.
    pub centroid: f64,
    /// Union of member extents along the axis.
    pub extent: (f64, f64),
}

impl Cluster {
    fn seed(idx: usize, s: &WallSegment2D) -> Self {
        Self {
            orientation: s.orientation,
            members: vec![idx],
            centroid: s.perp(),
            extent: s.along(),
        }
    }

    fn insert(&mut self, idx: usize, segments: &[WallSegment2D]) {
        self.members.push(idx);
        let total: f64 = self.members.iter().map(|&k| segments[k].length()).sum();
        self.centroid = self
            .members
            .iter()
            .map(|&k| segments[k].perp() * segments[k].length())
            .sum::<f64>()
            / total;
        let (lo, hi) = segments[idx].along();
        self.extent = (self.extent.0.min(lo), self.extent.1.max(hi));
    }
}

fn overlap_fraction(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let shorter = (a.1 - a.0).min(b.1 - b.0);
    if shorter > 0.0 {
        inter / shorter
    } else {
        0.0
    }
}

/// True when some opposite-category segment sits in the along-axis gap
/// between `s` and the cluster and reaches (within `margin`) the line
/// through them.
fn crossed(s: &WallSegment2D, extent: (f64, f64), centroid: f64, opposite: &[WallSegment2D], margin: f64) -> bool {
    let (lo, hi) = s.along();
    let gap = if hi < extent.0 {
        (hi, extent.0)
    } else if extent.1 < lo {
        (extent.1, lo)
    } else {
        return false;
    };
    let (c0, c1) = (s.perp().min(centroid), s.perp().max(centroid));
    opposite.iter().any(|o| {
        let pos = o.perp();
        let (olo, ohi) = o.along();
        pos > gap.0 && pos < gap.1 && olo - margin <= c1 && ohi + margin >= c0
    })
}

/// Greedy clustering of one category of segments. Segments are visited by
/// increasing cross-axis coordinate (ties by image and plane index); each one
/// joins the first cluster with no member from its image, whose centroid is
/// within `proximity_threshold`, and that either overlaps it by more than
/// `overlap_threshold` or is not separated from it by an `opposite` segment.
pub fn merge_planes(segments: &[WallSegment2D], opposite: &[WallSegment2D], params: &MergeParams) -> Vec<Cluster> {
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&segments[i], &segments[j]);
        a.perp()
            .total_cmp(&b.perp())
            .then((a.image_id, a.source_plane_index).cmp(&(b.image_id, b.source_plane_index)))
    });
    let mut clusters: Vec<Cluster> = Vec::new();
    for idx in order {
        let s = &segments[idx];
        let mut found = None;
        for (k, c) in clusters.iter().enumerate() {
            if c.members.iter().any(|&m| segments[m].image_id == s.image_id) {
                continue;
            }
            if (s.perp() - c.centroid).abs() >= params.proximity_threshold {
                continue;
            }
            if overlap_fraction(s.along(), c.extent) > params.overlap_threshold
                || !crossed(s, c.extent, c.centroid, opposite, params.margin)
            {
                found = Some(k);
                break;
            }
        }
        match found {
            Some(k) => clusters[k].insert(idx, segments),
            None => clusters.push(Cluster::seed(idx, s)),
        }
    }
    clusters
}

/// Exhaustive partition search for small inputs (at most 12 segments).
///
/// A block is feasible when its segments come from distinct images, lie
/// within `proximity_threshold` of each other across the axis and no pair is
/// separated by an `opposite` segment. Returns the feasible partition with
/// the fewest blocks, ties broken by the smallest total pairwise distance of
/// segment centres. Blocks are listed by smallest member.
pub fn merge_exhaustive(
    segments: &[WallSegment2D],
    opposite: &[WallSegment2D],
    params: &MergeParams,
) -> Option<Vec<Vec<usize>>> {
    let n = segments.len();
    if n > 12 {
        return None;
    }
    let pair_ok = |i: usize, j: usize| {
        let (a, b) = (&segments[i], &segments[j]);
        a.image_id != b.image_id
            && (a.perp() - b.perp()).abs() < params.proximity_threshold
            && (overlap_fraction(a.along(), b.along()) > params.overlap_threshold
                || !crossed(a, b.along(), b.perp(), opposite, params.margin))
    };
    let ok: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| i == j || pair_ok(i, j)).collect()).collect();
    let dist = |i: usize, j: usize| (segments[i].midpoint() - segments[j].midpoint()).norm();
    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    let mut assign = vec![0usize; n];
    fn rec(
        i: usize,
        blocks: usize,
        cost: f64,
        assign: &mut Vec<usize>,
        ok: &[Vec<bool>],
        dist: &dyn Fn(usize, usize) -> f64,
        best: &mut Option<(usize, f64, Vec<usize>)>,
    ) {
        let n = assign.len();
        if let Some((bb, bc, _)) = best {
            if blocks > *bb || (blocks == *bb && cost >= *bc) {
                return;
            }
        }
        if i == n {
            *best = Some((blocks, cost, assign.clone()));
            return;
        }
        for b in 0..=blocks {
            if b < blocks && !(0..i).filter(|&j| assign[j] == b).all(|j| ok[i][j]) {
                continue;
            }
            let extra: f64 = (0..i).filter(|&j| assign[j] == b).map(|j| dist(i, j)).sum();
            assign[i] = b;
            rec(i + 1, blocks.max(b + 1), cost + extra, assign, ok, dist, best);
        }
    }
    rec(0, 0, 0.0, &mut assign, &ok, &dist, &mut best);
    let (blocks, _, assign) = best?;
    Some((0..blocks).map(|b| (0..n).filter(|&i| assign[i] == b).collect()).collect())
}

/// Where a merged plane came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaneSource {
    pub image_id: usize,
    pub plane_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutPlane {
    pub id: usize,
    pub plane: Plane,
    pub sources: Vec<PlaneSource>,
}

/// Floor-level endpoints of a wall's extent, in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WallExtent {
    pub plane: usize,
    pub a: Vec3,
    pub b: Vec3,
}

/// Final world-frame layout. Plane 0 is the floor, plane 1 the ceiling and
/// the rest are walls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub planes: Vec<LayoutPlane>,
    pub lines: Vec<PlaneLine>,
    pub junctions: Vec<PlaneJunction>,
    pub adjacency: Vec<Vec<bool>>,
    pub walls: Vec<WallExtent>,
    /// Closed floor polygon (world points on the floor) when the wall
    /// adjacency forms a single cycle; empty otherwise.
    pub footprint: Vec<Vec3>,
    pub warnings: Vec<MergeWarning>,
}

impl Layout {
    pub fn floor(&self) -> &Plane {
        &self.planes[0].plane
    }

    pub fn ceiling(&self) -> &Plane {
        &self.planes[1].plane
    }

    pub fn plain_planes(&self) -> Vec<Plane> {
        self.planes.iter().map(|p| p.plane).collect()
    }

    /// Lines related through a shared junction.
    pub fn line_adjacency(&self) -> Vec<Vec<bool>> {
        let n = self.lines.len();
        let mut out = vec![vec![false; n]; n];
        for j in &self.junctions {
            let on: Vec<usize> = (0..n)
                .filter(|&k| self.lines[k].planes.iter().all(|p| j.planes.contains(p)))
                .collect();
            for &a in &on {
                for &b in &on {
                    out[a][b] |= a != b;
                }
            }
        }
        out
    }

    /// Closed prism for ray casting.
    pub fn room_model(&self) -> RoomModel {
        let room = RoomModel::new(self.plain_planes(), 0, 1, Vec::new(), Vec::new());
        let walls = self
            .walls
            .iter()
            .map(|w| WallFace {
                plane: w.plane,
                a: room.to_2d(&w.a),
                b: room.to_2d(&w.b),
            })
            .collect();
        let footprint = self.footprint.iter().map(|p| room.to_2d(p)).collect();
        RoomModel {
            walls,
            footprint,
            ..room
        }
    }

    /// Expresses the layout in another frame: `x ↦ pose(x)`.
    pub fn transformed(&self, pose: &PoseSE3) -> Layout {
        let mut out = self.clone();
        for p in &mut out.planes {
            p.plane = transform_plane(&p.plane, pose);
        }
        for l in &mut out.lines {
            l.line.point = pose.transform_point(&l.line.point);
            l.line.direction = pose.transform_vector(&l.line.direction);
        }
        for j in &mut out.junctions {
            j.junction.position = pose.transform_point(&j.junction.position);
        }
        for w in &mut out.walls {
            w.a = pose.transform_point(&w.a);
            w.b = pose.transform_point(&w.b);
        }
        for p in &mut out.footprint {
            *p = pose.transform_point(p);
        }
        out
    }
}

/// Everything the merge produced, including the scene-frame segments for
/// plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeOutput {
    pub layout: Layout,
    /// Snapped segments in the scene frame (world floor plane rotated by `−θ`).
    pub segments: Vec<WallSegment2D>,
    /// Layout plane id per segment; `None` for unclassified segments.
    pub segment_plane: Vec<Option<usize>>,
    pub theta: f64,
}

/// Links wall ends no neighbour accounts for, when the corner of the two
/// walls lies on the outward extension of both ends. Covers corners that no
/// view saw. Cheapest total extension first.
fn close_open_ends(adjacency: &mut [Vec<bool>], lines2d: &[(Orientation, f64, (f64, f64))], margin: f64) {
    let n = lines2d.len();
    // open[k][0] is the low end of wall k, open[k][1] the high end.
    let mut open = vec![[true, true]; n];
    let end_of = |k: usize, c: f64| {
        let e = lines2d[k].2;
        usize::from((c - e.1).abs() < (c - e.0).abs())
    };
    for x in 0..n {
        for y in 0..n {
            if adjacency[x + 2][y + 2] && lines2d[x].0 != lines2d[y].0 {
                open[x][end_of(x, lines2d[y].1)] = false;
            }
        }
    }
    let mut candidates = Vec::new();
    for x in 0..n {
        for y in 0..n {
            let ((ox, cx, _), (oy, cy, _)) = (lines2d[x], lines2d[y]);
            if ox != Orientation::Vertical || oy != Orientation::Horizontal || adjacency[x + 2][y + 2] {
                continue;
            }
            let (ex, ey) = (end_of(x, cy), end_of(y, cx));
            if !open[x][ex] || !open[y][ey] {
                continue;
            }
            let outward = |k: usize, end: usize, c: f64| {
                let e = lines2d[k].2;
                if end == 1 { c - e.1 } else { e.0 - c }
            };
            let (dx, dy) = (outward(x, ex, cy), outward(y, ey, cx));
            if dx >= -margin && dy >= -margin {
                candidates.push((dx.max(0.0) + dy.max(0.0), x, ex, y, ey));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.3).cmp(&(b.1, b.3))));
    for (_, x, ex, y, ey) in candidates {
        if open[x][ex] && open[y][ey] {
            open[x][ex] = false;
            open[y][ey] = false;
            adjacency[x + 2][y + 2] = true;
            adjacency[y + 2][x + 2] = true;
        }
    }
}


/// Turns clusters into wall planes and completes the layout.
///
/// `segments` are the snapped scene-frame segments that `clusters` index,
/// `theta` the scene rotation. Wall–wall adjacency is the union of per-view
/// adjacency lifted through cluster membership and a geometric rule:
/// perpendicular walls whose extents both end within `margin` of their
/// corner. Every wall is adjacent to floor and ceiling.
#[allow(clippy::too_many_arguments)]
pub fn assemble_layout(
    clusters: &[Cluster],
    segments: &[WallSegment2D],
    theta: f64,
    floor: Plane,
    ceiling: Plane,
    partials: &[PartialLayout],
    params: &MergeParams,
) -> Layout {
    let up = floor.normal;
    let (ex, ez) = horizontal_basis(&up);
    let lift = |q: &Vec2| {
        let p = rotate(q, theta);
        ex * p.x + ez * p.y - up * floor.offset
    };
    let mut planes = vec![
        LayoutPlane {
            id: 0,
            plane: floor,
            sources: sources_of(partials, SemanticClass::Floor),
        },
        LayoutPlane {
            id: 1,
            plane: ceiling,
            sources: sources_of(partials, SemanticClass::Ceiling),
        },
    ];
    let mut warnings = Vec::new();
    if clusters.is_empty() {
        warnings.push(MergeWarning::NoWalls);
    }
    // Scene-frame line per wall: axis normal `n` and `n · q = c`.
    let mut lines2d = Vec::with_capacity(clusters.len());
    for (k, c) in clusters.iter().enumerate() {
        let axis = match c.orientation {
            Orientation::Vertical => Vec2::x(),
            _ => Vec2::y(),
        };
        let (mut pos, mut neg) = (0.0, 0.0);
        let mut offset = 0.0;
        let mut total = 0.0;
        for &m in &c.members {
            let s = &segments[m];
            if s.normal.dot(&axis) >= 0.0 {
                pos += s.length();
            } else {
                neg += s.length();
            }
            offset += s.perp() * s.length();
            total += s.length();
        }
        let coord = offset / total;
        let n2 = if pos >= neg { axis } else { -axis };
        let world_n2 = rotate(&n2, theta);
        let normal = ex * world_n2.x + ez * world_n2.y;
        // n · x = n2 · q for points on the wall; the scene-frame line is
        // n2 · q = ±coord.
        let d = -n2.dot(&(axis * coord));
        planes.push(LayoutPlane {
            id: k + 2,
            plane: Plane::wall(normal, d),
            sources: c
                .members
                .iter()
                .map(|&m| PlaneSource {
                    image_id: segments[m].image_id,
                    plane_index: segments[m].source_plane_index,
                })
                .collect(),
        });
        lines2d.push((c.orientation, coord, c.extent));
    }
    let n = planes.len();
    let mut adjacency = vec![vec![false; n]; n];
    for w in 2..n {
        for fc in [0, 1] {
            adjacency[fc][w] = true;
            adjacency[w][fc] = true;
        }
    }
    // Per-view adjacency through cluster membership.
    let mut plane_of: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (k, c) in clusters.iter().enumerate() {
        for &m in &c.members {
            plane_of.insert((segments[m].image_id, segments[m].source_plane_index), k + 2);
        }
    }
    for p in partials {
        for a in 0..p.planes.len() {
            for b in a + 1..p.planes.len() {
                if !p.adjacency[a][b] {
                    continue;
                }
                if let (Some(&x), Some(&y)) = (plane_of.get(&(p.image_id, a)), plane_of.get(&(p.image_id, b))) {
                    if x != y && lines2d[x - 2].0 != lines2d[y - 2].0 {
                        adjacency[x][y] = true;
                        adjacency[y][x] = true;
                    }
                }
            }
        }
    }
    // Geometric completion.
    for x in 0..lines2d.len() {
        for y in 0..lines2d.len() {
            let ((ox, cx, ext_x), (oy, cy, ext_y)) = (lines2d[x], lines2d[y]);
            if ox != Orientation::Vertical || oy != Orientation::Horizontal {
                continue;
            }
            // Vertical wall at x = cx spans z ∈ ext_x; horizontal at z = cy
            // spans x ∈ ext_y; their corner is (cx, cy).
            let ends_near = |c: f64, e: (f64, f64)| (c - e.0).abs().min((c - e.1).abs()) <= params.margin;
            if ends_near(cy, ext_x) && ends_near(cx, ext_y) {
                adjacency[x + 2][y + 2] = true;
                adjacency[y + 2][x + 2] = true;
            }
        }
    }
    close_open_ends(&mut adjacency, &lines2d, params.margin);
    let footprint2d = wall_cycle(&adjacency, &lines2d);
    let (walls, footprint) = match &footprint2d {
        Some(cycle) => {
            let m = cycle.len();
            let corners: Vec<Vec2> = (0..m).map(|i| corner(&lines2d[cycle[i] - 2], &lines2d[cycle[(i + 1) % m] - 2])).collect();
            let walls = (0..m)
                .map(|i| WallExtent {
                    plane: cycle[(i + 1) % m],
                    a: lift(&corners[i]),
                    b: lift(&corners[(i + 1) % m]),
                })
                .collect();
            (walls, corners.iter().map(lift).collect())
        }
        None => {
            if !clusters.is_empty() {
                warnings.push(MergeWarning::OpenFootprint);
            }
            let walls = lines2d
                .iter()
                .enumerate()
                .map(|(k, &(o, c, e))| {
                    let (a, b) = match o {
                        Orientation::Vertical => (Vec2::new(c, e.0), Vec2::new(c, e.1)),
                        _ => (Vec2::new(e.0, c), Vec2::new(e.1, c)),
                    };
                    WallExtent {
                        plane: k + 2,
                        a: lift(&a),
                        b: lift(&b),
                    }
                })
                .collect();
            (walls, Vec::new())
        }
    };
    let plain: Vec<Plane> = planes.iter().map(|p| p.plane).collect();
    let (lines, junctions) = lines_and_junctions(&plain, &adjacency);
    Layout {
        planes,
        lines,
        junctions,
        adjacency,
        walls,
        footprint,
        warnings,
    }
}

fn sources_of(partials: &[PartialLayout], class: SemanticClass) -> Vec<PlaneSource> {
    partials
        .iter()
        .filter_map(|p| {
            p.planes
                .iter()
                .position(|lp| lp.plane.class == class)
                .map(|k| PlaneSource {
                    image_id: p.image_id,
                    plane_index: k,
                })
        })
        .collect()
}

fn corner(a: &(Orientation, f64, (f64, f64)), b: &(Orientation, f64, (f64, f64))) -> Vec2 {
    match a.0 {
        Orientation::Vertical => Vec2::new(a.1, b.1),
        _ => Vec2::new(b.1, a.1),
    }
}

/// Layout plane ids of the walls in cycle order, when every wall has exactly
/// two wall neighbours, alternating in orientation, and they form one cycle.
fn wall_cycle(adjacency: &[Vec<bool>], lines2d: &[(Orientation, f64, (f64, f64))]) -> Option<Vec<usize>> {
    let n = adjacency.len();
    if n < 6 {
        return None;
    }
    let nbrs: Vec<Vec<usize>> = (2..n).map(|w| (2..n).filter(|&v| adjacency[w][v]).collect()).collect();
    if nbrs.iter().any(|v| v.len() != 2) {
        return None;
    }
    let mut cycle = vec![2usize];
    let mut prev = 2;
    let mut cur = nbrs[0][0];
    while cur != 2 {
        if cycle.len() > n {
            return None;
        }
        cycle.push(cur);
        let next = if nbrs[cur - 2][0] == prev { nbrs[cur - 2][1] } else { nbrs[cur - 2][0] };
        prev = cur;
        cur = next;
    }
    if cycle.len() != n - 2 {
        return None;
    }
    let m = cycle.len();
    if (0..m).any(|i| lines2d[cycle[i] - 2].0 == lines2d[cycle[(i + 1) % m] - 2].0) {
        return None;
    }
    Some(cycle)
}

/// The full multi-view merge.
pub fn merge_views(
    partials: &[PartialLayout],
    transforms: &[ViewTransform],
    params: &MergeParams,
) -> Result<MergeOutput, MergeError> {
    params.validate()?;
    let (floor, ceiling) = average_floor_ceiling(partials, transforms)?;
    let (raw, mut warnings) = project_walls(partials, transforms, &floor)?;
    let theta = if raw.is_empty() { 0.0 } else { estimate_scene_rotation(&raw) };
    let snapped = snap_axis(&raw, theta, params);
    let pick = |o: Orientation| -> (Vec<usize>, Vec<WallSegment2D>) {
        let idx: Vec<usize> = (0..snapped.len()).filter(|&k| snapped[k].orientation == o).collect();
        let segs = idx.iter().map(|&k| snapped[k]).collect();
        (idx, segs)
    };
    let (vi, vs) = pick(Orientation::Vertical);
    let (hi, hs) = pick(Orientation::Horizontal);
    let (vc, hc) = rayon::join(|| merge_planes(&vs, &hs, params), || merge_planes(&hs, &vs, params));
    // Re-index cluster members into `snapped`.
    let clusters: Vec<Cluster> = vc
        .into_iter()
        .map(|c| Cluster {
            members: c.members.iter().map(|&m| vi[m]).collect(),
            ..c
        })
        .chain(hc.into_iter().map(|c| Cluster {
            members: c.members.iter().map(|&m| hi[m]).collect(),
            ..c
        }))
        .collect();
    let mut layout = assemble_layout(&clusters, &snapped, theta, floor, ceiling, partials, params);
    warnings.append(&mut layout.warnings);
    layout.warnings = warnings;
    let mut segment_plane = vec![None; snapped.len()];
    for (k, c) in clusters.iter().enumerate() {
        for &m in &c.members {
            segment_plane[m] = Some(k + 2);
        }
    }
    Ok(MergeOutput {
        layout,
        segments: snapped,
        segment_plane,
        theta,
    })
}
