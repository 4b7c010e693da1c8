//! Per-view layout extraction.
//!
//! Planes are fitted to the pointmap under each mask, wall adjacency is decided
//! by how well the shared mask frontier agrees with the planes' intersection
//! line, and lines and junctions follow from the adjacency.

use crate::geom::{
    fit_plane, junction, plane_intersection, GeomError, Junction3D, LabelMap, Line3D, Plane,
    Pointmap, SemanticClass, Vec3,
};
use crate::scene::ViewBundle;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum G1Error {
    #[error("pointmap is {pw}x{ph} but mask is {mw}x{mh}")]
    DimensionMismatch {
        pw: usize,
        ph: usize,
        mw: usize,
        mh: usize,
    },
    #[error("epsilon1 must be positive, got {0}")]
    InvalidEpsilon(f64),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct G1Params {
    /// Depth-consistency tolerance, relative to mean scene depth.
    pub epsilon1: f64,
    pub min_pixels: usize,
    /// Gravity-opposing axis in the camera frame.
    pub up: Vec3,
}

impl Default for G1Params {
    fn default() -> Self {
        Self {
            epsilon1: 0.005,
            min_pixels: 100,
            up: -Vec3::y(),
        }
    }
}

impl G1Params {
    pub fn validate(&self) -> Result<(), G1Error> {
        if !(self.epsilon1 > 0.0) {
            return Err(G1Error::InvalidEpsilon(self.epsilon1));
        }
        Ok(())
    }
}

/// A plane fitted to one mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftedPlane {
    pub plane: Plane,
    pub mask_id: i32,
    pub pixel_count: usize,
    pub rms: f64,
    /// Convex hull of the support points after projection onto the plane.
    pub hull: Vec<Vec3>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum G1Warning {
    SmallMask { mask_id: i32, pixels: usize },
    DegenerateMask { mask_id: i32 },
    ExtraFloor { mask_id: i32 },
    ExtraCeiling { mask_id: i32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftedPlanes {
    pub planes: Vec<LiftedPlane>,
    pub warnings: Vec<G1Warning>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneLine {
    pub planes: [usize; 2],
    pub line: Line3D,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneJunction {
    pub planes: [usize; 3],
    pub junction: Junction3D,
}

/// Camera-frame layout of one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialLayout {
    pub image_id: usize,
    pub planes: Vec<LiftedPlane>,
    pub lines: Vec<PlaneLine>,
    pub junctions: Vec<PlaneJunction>,
    pub adjacency: Vec<Vec<bool>>,
    pub warnings: Vec<G1Warning>,
}

impl PartialLayout {
    pub fn floor(&self) -> Option<&LiftedPlane> {
        self.planes.iter().find(|p| p.plane.class == SemanticClass::Floor)
    }

    pub fn ceiling(&self) -> Option<&LiftedPlane> {
        self.planes.iter().find(|p| p.plane.class == SemanticClass::Ceiling)
    }
}

fn check_shape(pm: &Pointmap, masks: &LabelMap) -> Result<(), G1Error> {
    if pm.width != masks.width || pm.height != masks.height {
        return Err(G1Error::DimensionMismatch {
            pw: pm.width,
            ph: pm.height,
            mw: masks.width,
            mh: masks.height,
        });
    }
    Ok(())
}

/// Fits one plane per mask id, oriented toward the camera centre, and assigns
/// its class from the angle to `params.up`. When several masks classify as
/// floor (or ceiling) only the one with the most pixels keeps that role.
pub fn lift_planes(
    pm: &Pointmap,
    masks: &LabelMap,
    params: &G1Params,
) -> Result<LiftedPlanes, G1Error> {
    check_shape(pm, masks)?;
    params.validate()?;
    let mut support: BTreeMap<i32, Vec<Vec3>> = BTreeMap::new();
    for (i, &label) in masks.data.iter().enumerate() {
        if label >= 0 && pm.valid[i] {
            support.entry(label).or_default().push(pm.points[i]);
        }
    }
    let up = params.up.normalize();
    let cos30 = 30f64.to_radians().cos();
    let mut planes = Vec::new();
    let mut warnings = Vec::new();
    for (mask_id, points) in support {
        if points.len() < params.min_pixels.max(3) {
            warnings.push(G1Warning::SmallMask {
                mask_id,
                pixels: points.len(),
            });
            continue;
        }
        let fit = match fit_plane(&points, None) {
            Ok(f) => f.oriented_toward(&Vec3::zeros()),
            Err(GeomError::Degenerate { .. }) => {
                warnings.push(G1Warning::DegenerateMask { mask_id });
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let c = fit.plane.normal.dot(&up);
        let class = if c > cos30 {
            SemanticClass::Floor
        } else if c < -cos30 {
            SemanticClass::Ceiling
        } else {
            SemanticClass::Wall
        };
        let plane = fit.plane.with_class(class);
        let hull = in_plane_hull(&plane, &points);
        planes.push(LiftedPlane {
            plane,
            mask_id,
            pixel_count: points.len(),
            rms: fit.rms,
            hull,
        });
    }
    for (class, extra) in [
        (SemanticClass::Floor, G1Warning::ExtraFloor { mask_id: 0 }),
        (SemanticClass::Ceiling, G1Warning::ExtraCeiling { mask_id: 0 }),
    ] {
        let keep = planes
            .iter()
            .enumerate()
            .filter(|(_, p)| p.plane.class == class)
            .max_by_key(|(i, p)| (p.pixel_count, std::cmp::Reverse(*i)))
            .map(|(i, _)| i);
        let mut k = 0;
        planes.retain(|p| {
            let idx = k;
            k += 1;
            if p.plane.class != class || Some(idx) == keep {
                return true;
            }
            warnings.push(match extra {
                G1Warning::ExtraFloor { .. } => G1Warning::ExtraFloor { mask_id: p.mask_id },
                _ => G1Warning::ExtraCeiling { mask_id: p.mask_id },
            });
            false
        });
    }
    Ok(LiftedPlanes { planes, warnings })
}

/// Convex hull (counter-clockwise about the normal) of `points` projected onto
/// `plane`.
pub fn in_plane_hull(plane: &Plane, points: &[Vec3]) -> Vec<Vec3> {
    let n = plane.normal;
    let seed = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = (seed - n * n.dot(&seed)).normalize();
    let v = n.cross(&u);
    let origin = -n * plane.offset;
    let mut pts: Vec<(f64, f64)> = points
        .iter()
        .map(|x| ((x - origin).dot(&u), (x - origin).dot(&v)))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts.iter().map(|&(a, b)| origin + u * a + v * b).collect();
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull.iter().map(|&(a, b)| origin + u * a + v * b).collect()
}

/// Distance from `line` to the planar sector spanned by the camera rays through
/// `xp` and `xq`. Zero when the line passes between the two pixels, which is
/// exactly what a real crease between two neighbouring pixels looks like.
fn wedge_distance(line: &Line3D, xp: &Vec3, xq: &Vec3) -> f64 {
    let m = xp.cross(xq);
    let denom = m.dot(&line.direction);
    if m.norm_squared() > 0.0 && denom.abs() > 1e-12 * m.norm() {
        let s = -m.dot(&line.point) / denom;
        let y = line.point + line.direction * s;
        if xp.cross(&y).dot(&m) >= 0.0 && y.cross(xq).dot(&m) >= 0.0 && y.dot(&(xp + xq)) > 0.0 {
            return 0.0;
        }
    }
    let origin = Vec3::zeros();
    line.distance_to_segment(&origin, &(xp * 2.0))
        .min(line.distance_to_segment(&origin, &(xq * 2.0)))
}

/// Depth-consistency score for every plane pair: the median over 8-connected
/// frontier pixel pairs of the distance between the pair's intersection line
/// and the sector between the two pixels' rays, divided by the mean valid
/// depth. `None` when the masks share no frontier or the planes are parallel.
pub fn adjacency_scores(
    planes: &[LiftedPlane],
    masks: &LabelMap,
    pm: &Pointmap,
) -> Result<Vec<Vec<Option<f64>>>, G1Error> {
    check_shape(pm, masks)?;
    let n = planes.len();
    let index: BTreeMap<i32, usize> = planes.iter().enumerate().map(|(i, p)| (p.mask_id, i)).collect();
    let (w, h) = (pm.width, pm.height);
    let mut chords: BTreeMap<(usize, usize), Vec<(usize, usize)>> = BTreeMap::new();
    // Forward half of the 8-neighbourhood visits each pixel pair once.
    let offsets = [(0isize, 1isize), (1, -1), (1, 0), (1, 1)];
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            let Some(&a) = index.get(&masks.data[p]) else { continue };
            if !pm.valid[p] {
                continue;
            }
            for (dr, dc) in offsets {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    continue;
                }
                let q = rr as usize * w + cc as usize;
                let Some(&b) = index.get(&masks.data[q]) else { continue };
                if a == b || !pm.valid[q] {
                    continue;
                }
                let key = (a.min(b), a.max(b));
                let pair = if a < b { (p, q) } else { (q, p) };
                chords.entry(key).or_default().push(pair);
            }
        }
    }
    let (sum, count) = pm.iter_valid().fold((0.0, 0usize), |(s, k), (_, x)| (s + x.z, k + 1));
    let scale = if count > 0 { sum / count as f64 } else { 0.0 };
    let mut scores = vec![vec![None; n]; n];
    for ((a, b), pairs) in chords {
        let Ok(line) = plane_intersection(&planes[a].plane, &planes[b].plane) else {
            continue;
        };
        let mut d: Vec<f64> = pairs
            .iter()
            .map(|&(p, q)| wedge_distance(&line, &pm.points[p], &pm.points[q]))
            .collect();
        d.sort_by(f64::total_cmp);
        let m = d.len();
        let median = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
        let s = if scale > 0.0 { median / scale } else { f64::INFINITY };
        scores[a][b] = Some(s);
        scores[b][a] = Some(s);
    }
    Ok(scores)
}

/// Pseudo wall adjacency: pairs whose [`adjacency_scores`] fall below
/// `epsilon1`.
pub fn infer_adjacency(
    planes: &[LiftedPlane],
    masks: &LabelMap,
    pm: &Pointmap,
    params: &G1Params,
) -> Result<Vec<Vec<bool>>, G1Error> {
    params.validate()?;
    Ok(adjacency_scores(planes, masks, pm)?
        .into_iter()
        .map(|row| row.into_iter().map(|s| s.is_some_and(|s| s < params.epsilon1)).collect())
        .collect())
}

/// Intersection lines of adjacent pairs and junctions of mutually adjacent
/// triples.
pub fn lines_and_junctions(
    planes: &[Plane],
    adjacency: &[Vec<bool>],
) -> (Vec<PlaneLine>, Vec<PlaneJunction>) {
    let n = planes.len();
    let mut lines = Vec::new();
    let mut junctions = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if !adjacency[a][b] {
                continue;
            }
            if let Ok(line) = plane_intersection(&planes[a], &planes[b]) {
                lines.push(PlaneLine { planes: [a, b], line });
            }
            for c in b + 1..n {
                if adjacency[a][c] && adjacency[b][c] {
                    if let Ok(j) = junction(&planes[a], &planes[b], &planes[c]) {
                        junctions.push(PlaneJunction {
                            planes: [a, b, c],
                            junction: j,
                        });
                    }
                }
            }
        }
    }
    (lines, junctions)
}

/// Partial layout of `bundle.image_id` from its own pointmap and masks.
pub fn build_partial_layout(bundle: &ViewBundle, params: &G1Params) -> Result<PartialLayout, G1Error> {
    let pm = &bundle.pointmap_self;
    let masks = &bundle.plane_masks;
    let lifted = lift_planes(pm, masks, params)?;
    let adjacency = infer_adjacency(&lifted.planes, masks, pm, params)?;
    let plain: Vec<Plane> = lifted.planes.iter().map(|p| p.plane).collect();
    let (lines, junctions) = lines_and_junctions(&plain, &adjacency);
    Ok(PartialLayout {
        image_id: bundle.image_id,
        planes: lifted.planes,
        lines,
        junctions,
        adjacency,
        warnings: lifted.warnings,
    })
}
