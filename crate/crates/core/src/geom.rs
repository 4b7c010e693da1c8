//! Geometric primitives shared by every stage of the pipeline.
//!
//! Conventions used throughout the crate:
//!
//! * Camera frames are `x` right, `y` down, `z` forward. Pixel `(u, v)` is
//!   column `u`, row `v`, and maps to the ray `((u - cx) / fx, (v - cy) / fy, 1)`.
//! * A [`Plane`] is the zero set of `n·x + d` with `‖n‖ = 1`. Planes that come
//!   from a camera view are oriented so that the camera centre lies on the
//!   positive side, which for a closed room means normals face the interior.
//! * Poses are camera-to-world: `x_world = R x_cam + t`.

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;
pub type Mat3 = Matrix3<f64>;

/// Minimum `1 - |n1·n2|` for two planes to be considered non-parallel.
pub const EPS_PARALLEL: f64 = 1e-6;
/// Minimum `|det|` of the stacked normals for a three-plane junction.
pub const EPS_JUNCTION_DET: f64 = 1e-9;

const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("non-finite depth {value} at row {row}, column {col}")]
    NonFiniteDepth { row: usize, col: usize, value: f64 },
    #[error("negative depth {value} at row {row}, column {col}")]
    NegativeDepth { row: usize, col: usize, value: f64 },
    #[error("degenerate point set: {count} points with rank {rank} (need rank >= 2)")]
    Degenerate { count: usize, rank: usize },
    #[error("planes are parallel (|n1·n2| = {dot})")]
    ParallelPlanes { dot: f64 },
    #[error("plane triple is degenerate (det = {det:e})")]
    SingularJunction { det: f64 },
    #[error("invalid intrinsics: fx = {fx}, fy = {fy}")]
    InvalidIntrinsics { fx: f64, fy: f64 },
    #[error("rotation is not a proper orthonormal matrix")]
    InvalidRotation,
    #[error("vector has zero or non-finite norm")]
    ZeroVector,
    #[error("weights must match points ({points} points, {weights} weights) and be non-negative")]
    BadWeights { points: usize, weights: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SemanticClass {
    Floor,
    Ceiling,
    Wall,
}

/// Oriented plane `n·x + d = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: Vec3,
    pub offset: f64,
    pub class: SemanticClass,
}

impl Plane {
    /// Builds a plane, normalising `normal` and rescaling `offset` to match.
    pub fn new(normal: Vec3, offset: f64, class: SemanticClass) -> Result<Self, GeomError> {
        let norm = normal.norm();
        if !norm.is_finite() || norm == 0.0 || !offset.is_finite() {
            return Err(GeomError::ZeroVector);
        }
        Ok(Self {
            normal: normal / norm,
            offset: offset / norm,
            class,
        })
    }

    pub fn wall(normal: Vec3, offset: f64) -> Self {
        Self::new(normal, offset, SemanticClass::Wall).expect("finite wall normal")
    }

    pub fn signed_distance(&self, x: &Vec3) -> f64 {
        self.normal.dot(x) + self.offset
    }

    pub fn flipped(&self) -> Self {
        Self {
            normal: -self.normal,
            offset: -self.offset,
            class: self.class,
        }
    }

    /// Returns the plane with its sign chosen so that `point` is on the
    /// non-negative side.
    pub fn oriented_toward(&self, point: &Vec3) -> Self {
        if self.signed_distance(point) < 0.0 {
            self.flipped()
        } else {
            *self
        }
    }

    pub fn with_class(mut self, class: SemanticClass) -> Self {
        self.class = class;
        self
    }

    /// Ray parameter `s > 0` at which `origin + s·dir` meets the plane.
    pub fn ray_hit(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let denom = self.normal.dot(dir);
        if denom.abs() < 1e-15 {
            return None;
        }
        let s = -self.signed_distance(origin) / denom;
        (s > 0.0 && s.is_finite()).then_some(s)
    }

    /// Angle between normals in radians, in `[0, π]`.
    pub fn angle_to(&self, other: &Plane) -> f64 {
        self.normal.dot(&other.normal).clamp(-1.0, 1.0).acos()
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSE3 {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Validates that `rotation` is in SO(3) to within `1e-9`.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeomError> {
        let ortho = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        if !(ortho <= UNIT_TOL) || (rotation.determinant() - 1.0).abs() > UNIT_TOL {
            return Err(GeomError::InvalidRotation);
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Rotation given as an axis-angle vector (`‖ω‖` radians about `ω/‖ω‖`).
    pub fn from_axis_angle(omega: &Vec3, translation: Vec3) -> Self {
        Self {
            rotation: so3_exp(omega),
            translation,
        }
    }

    pub fn transform_point(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &PoseSE3) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.translation
    }

    /// Re-orthonormalises the rotation block (polar projection via SVD).
    pub fn orthonormalized(&self) -> Self {
        Self {
            rotation: project_to_so3(&self.rotation),
            translation: self.translation,
        }
    }
}

/// Rodrigues exponential map.
pub fn so3_exp(omega: &Vec3) -> Mat3 {
    Rotation3::from_scaled_axis(*omega).into_inner()
}

/// Geodesic angle of a rotation matrix, in radians.
pub fn rotation_angle(r: &Mat3) -> f64 {
    // atan2 keeps full precision near 0 and π, where acos of the trace does not.
    let s = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm() / 2.0;
    s.atan2((r.trace() - 1.0) / 2.0)
}

/// Nearest rotation in Frobenius norm.
pub fn project_to_so3(m: &Mat3) -> Mat3 {
    let svd = SVD::new(*m, true, true);
    let u = svd.u.expect("u");
    let vt = svd.v_t.expect("v_t");
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * vt;
    }
    r
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeomError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(GeomError::InvalidIntrinsics { fx, fy });
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Unnormalised ray through pixel `(u, v)`, with unit `z`.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Perspective projection of a camera-frame point.
    pub fn project(&self, p: &Vec3) -> Option<Vec2> {
        (p.z > 0.0).then(|| Vec2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Intrinsics for an image downsampled by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            fx: self.fx * factor,
            fy: self.fy * factor,
            cx: self.cx * factor,
            cy: self.cy * factor,
        }
    }
}

/// Row-major `H × W` grid of scalars (depth or confidence).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ScalarMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, GeomError> {
        if data.len() != width * height {
            return Err(GeomError::DimensionMismatch(format!(
                "{} values for a {height}x{width} map",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }
}

/// Row-major grid of integer plane labels; `-1` means "no plane".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<i32>,
}

impl LabelMap {
    pub const NONE: i32 = -1;

    pub fn new(width: usize, height: usize, data: Vec<i32>) -> Result<Self, GeomError> {
        if data.len() != width * height {
            return Err(GeomError::DimensionMismatch(format!(
                "{} labels for a {height}x{width} map",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: i32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> i32 {
        self.data[row * self.width + col]
    }

    /// Distinct non-negative labels in ascending order.
    pub fn labels(&self) -> Vec<i32> {
        let mut ids: Vec<i32> = self.data.iter().copied().filter(|&l| l >= 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Per-pixel 3D points with a validity mask. Invalid entries hold zeros and
/// must not be read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pointmap {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vec3>,
    pub valid: Vec<bool>,
}

impl Pointmap {
    pub fn new(
        width: usize,
        height: usize,
        points: Vec<Vec3>,
        valid: Vec<bool>,
    ) -> Result<Self, GeomError> {
        let n = width * height;
        if points.len() != n || valid.len() != n {
            return Err(GeomError::DimensionMismatch(format!(
                "{} points / {} flags for a {height}x{width} pointmap",
                points.len(),
                valid.len()
            )));
        }
        Ok(Self {
            width,
            height,
            points,
            valid,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> Option<&Vec3> {
        let i = row * self.width + col;
        self.valid[i].then(|| &self.points[i])
    }

    /// Iterates `(index, point)` over valid pixels.
    pub fn iter_valid(&self) -> impl Iterator<Item = (usize, &Vec3)> {
        self.points
            .iter()
            .enumerate()
            .filter(move |(i, _)| self.valid[*i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Applies a rigid transform to every valid point.
    pub fn transformed(&self, pose: &PoseSE3) -> Self {
        let points = self
            .points
            .iter()
            .zip(&self.valid)
            .map(|(p, &v)| if v { pose.transform_point(p) } else { Vec3::zeros() })
            .collect();
        Self {
            width: self.width,
            height: self.height,
            points,
            valid: self.valid.clone(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            points: self.points.iter().map(|p| p * factor).collect(),
            valid: self.valid.clone(),
        }
    }

    pub fn same_shape(&self, width: usize, height: usize) -> bool {
        self.width == width && self.height == height
    }
}

/// Infinite 3D line through `point` along unit `direction`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line3D {
    pub point: Vec3,
    pub direction: Vec3,
}

impl Line3D {
    pub fn distance_to(&self, x: &Vec3) -> f64 {
        (x - self.point).cross(&self.direction).norm()
    }

    /// Smallest distance between the line and the closed segment `a`–`b`.
    pub fn distance_to_segment(&self, a: &Vec3, b: &Vec3) -> f64 {
        let ab = b - a;
        let d = self.direction;
        let w = a - self.point;
        // Minimise |w + s·ab - t·d| over s ∈ [0,1], t ∈ ℝ. Eliminating t leaves
        // a 1D quadratic in s on the component orthogonal to d.
        let ab_perp = ab - d * d.dot(&ab);
        let w_perp = w - d * d.dot(&w);
        let denom = ab_perp.norm_squared();
        let s = if denom > 0.0 {
            (-w_perp.dot(&ab_perp) / denom).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (w_perp + ab_perp * s).norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Junction3D {
    pub position: Vec3,
}

/// Lifts a depth map to a camera-frame pointmap. Zero depth marks a pixel
/// invalid.
pub fn backproject(depth: &ScalarMap, k: &Intrinsics) -> Result<Pointmap, GeomError> {
    let n = depth.width * depth.height;
    let mut points = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for row in 0..depth.height {
        for col in 0..depth.width {
            let d = depth.get(row, col);
            if !d.is_finite() {
                return Err(GeomError::NonFiniteDepth { row, col, value: d });
            }
            if d < 0.0 {
                return Err(GeomError::NegativeDepth { row, col, value: d });
            }
            if d == 0.0 {
                points.push(Vec3::zeros());
                valid.push(false);
            } else {
                points.push(Vec3::new(
                    (col as f64 - k.cx) * d / k.fx,
                    (row as f64 - k.cy) * d / k.fy,
                    d,
                ));
                valid.push(true);
            }
        }
    }
    Pointmap::new(depth.width, depth.height, points, valid)
}

/// Result of a least-squares plane fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFit {
    pub plane: Plane,
    /// Weighted RMS of point-to-plane residuals.
    pub rms: f64,
    pub centroid: Vec3,
}

impl PlaneFit {
    /// Re-orients the fitted plane so `viewpoint` lies on its positive side.
    pub fn oriented_toward(mut self, viewpoint: &Vec3) -> Self {
        self.plane = self.plane.oriented_toward(viewpoint);
        self
    }
}

/// Total-least-squares plane through `points`.
///
/// The normal is the right singular vector of the weighted covariance with the
/// smallest singular value. The returned sign has the first non-negligible
/// normal component positive; use [`PlaneFit::oriented_toward`] for the
/// camera-facing convention.
pub fn fit_plane(points: &[Vec3], weights: Option<&[f64]>) -> Result<PlaneFit, GeomError> {
    if let Some(w) = weights {
        if w.len() != points.len() || w.iter().any(|&x| !(x >= 0.0)) {
            return Err(GeomError::BadWeights {
                points: points.len(),
                weights: w.len(),
            });
        }
    }
    let weight = |i: usize| weights.map_or(1.0, |w| w[i]);
    let total: f64 = (0..points.len()).map(weight).sum();
    if points.len() < 3 || !(total > 0.0) {
        return Err(GeomError::Degenerate {
            count: points.len(),
            rank: points.len().min(2).saturating_sub(1),
        });
    }
    let centroid = points
        .iter()
        .enumerate()
        .fold(Vec3::zeros(), |acc, (i, p)| acc + p * weight(i))
        / total;
    let mut cov = Mat3::zeros();
    for (i, p) in points.iter().enumerate() {
        let q = p - centroid;
        cov += q * q.transpose() * weight(i);
    }
    cov /= total;

    let svd = SVD::new(cov, true, false);
    let u = svd.u.expect("u");
    let sv = svd.singular_values;
    let (mut imin, mut imax) = (0, 0);
    for i in 1..3 {
        if sv[i] < sv[imin] {
            imin = i;
        }
        if sv[i] > sv[imax] {
            imax = i;
        }
    }
    let scale = sv[imax];
    let rank = sv.iter().filter(|&&s| s > 1e-12 * scale.max(1e-300)).count();
    if scale <= 0.0 || rank < 2 {
        return Err(GeomError::Degenerate {
            count: points.len(),
            rank: if scale <= 0.0 { 0 } else { rank },
        });
    }
    let mut normal: Vec3 = u.column(imin).into_owned().normalize();
    if let Some(c) = normal.iter().find(|c| c.abs() > 1e-12) {
        if *c < 0.0 {
            normal = -normal;
        }
    }
    let offset = -normal.dot(&centroid);
    let rms = (sv[imin].max(0.0)).sqrt();
    Ok(PlaneFit {
        plane: Plane {
            normal,
            offset,
            class: SemanticClass::Wall,
        },
        rms,
        centroid,
    })
}

/// Intersection line of two non-parallel planes. The returned point is the
/// line's closest point to the origin.
pub fn plane_intersection(p1: &Plane, p2: &Plane) -> Result<Line3D, GeomError> {
    let dot = p1.normal.dot(&p2.normal);
    if dot.abs() >= 1.0 - EPS_PARALLEL {
        return Err(GeomError::ParallelPlanes { dot: dot.abs() });
    }
    let direction = p1.normal.cross(&p2.normal).normalize();
    let a = Mat3::from_rows(&[
        p1.normal.transpose(),
        p2.normal.transpose(),
        direction.transpose(),
    ]);
    let b = Vec3::new(-p1.offset, -p2.offset, 0.0);
    let point = a
        .lu()
        .solve(&b)
        .ok_or(GeomError::ParallelPlanes { dot: dot.abs() })?;
    Ok(Line3D { point, direction })
}

/// Common point of three planes.
pub fn junction(p1: &Plane, p2: &Plane, p3: &Plane) -> Result<Junction3D, GeomError> {
    let a = Mat3::from_rows(&[
        p1.normal.transpose(),
        p2.normal.transpose(),
        p3.normal.transpose(),
    ]);
    let det = a.determinant();
    if det.abs() <= EPS_JUNCTION_DET {
        return Err(GeomError::SingularJunction { det });
    }
    let b = Vec3::new(-p1.offset, -p2.offset, -p3.offset);
    let position = a.lu().solve(&b).ok_or(GeomError::SingularJunction { det })?;
    Ok(Junction3D { position })
}

/// Maps a plane through a rigid transform: points `x` on `p` become `R x + t`
/// on the result.
pub fn transform_plane(p: &Plane, pose: &PoseSE3) -> Plane {
    let normal = pose.rotation * p.normal;
    Plane {
        normal,
        offset: p.offset - normal.dot(&pose.translation),
        class: p.class,
    }
}

/// Orthonormal basis `(e_x, e_z)` of the plane perpendicular to `up`, chosen
/// so that `e_x × up = e_z` and `e_x` is the projection of the frame's x axis
/// whenever that is well defined.
pub fn horizontal_basis(up: &Vec3) -> (Vec3, Vec3) {
    let up = up.normalize();
    let mut seed = Vec3::x();
    if (seed - up * up.dot(&seed)).norm() < 1e-6 {
        seed = Vec3::z();
    }
    let ex = (seed - up * up.dot(&seed)).normalize();
    let ez = ex.cross(&up);
    (ex, ez)
}

/// Even-odd point-in-polygon test. Points on an edge are reported as inside
/// when they are within `tol` of it.
pub fn point_in_polygon(p: &Vec2, poly: &[Vec2], tol: f64) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    let mut inside = false;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        if point_segment_distance_2d(p, &a, &b) <= tol {
            return true;
        }
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x {
                inside = !inside;
            }
        }
    }
    inside
}

pub fn point_segment_distance_2d(p: &Vec2, a: &Vec2, b: &Vec2) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let s = if len2 > 0.0 {
        ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (a + ab * s - p).norm()
}
