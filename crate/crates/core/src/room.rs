//! Closed-room ray casting.
//!
//! A [`RoomModel`] is a prism: a floor and a ceiling plane plus vertical wall
//! faces bounded by a footprint polygon. It renders structural depth and
//! plane-id maps for both the synthetic oracle and reprojected layouts.

use crate::geom::{
    horizontal_basis, point_in_polygon, Intrinsics, LabelMap, Plane, PoseSE3, ScalarMap, Vec2,
    Vec3,
};
use rayon::prelude::*;

/// Acceptance slack when deciding whether a hit lies on a finite face.
const FACE_TOL: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct WallFace {
    /// Index into [`RoomModel::planes`].
    pub plane: usize,
    /// Segment endpoints in footprint coordinates.
    pub a: Vec2,
    pub b: Vec2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoomModel {
    pub planes: Vec<Plane>,
    pub floor: usize,
    pub ceiling: usize,
    pub walls: Vec<WallFace>,
    /// Footprint polygon in the `(e_x, e_z)` basis. Empty means "unbounded":
    /// floor and ceiling hits are then always accepted.
    pub footprint: Vec<Vec2>,
    pub ex: Vec3,
    pub ez: Vec3,
}

impl RoomModel {
    /// Builds the basis from the floor normal, which must point up.
    pub fn new(
        planes: Vec<Plane>,
        floor: usize,
        ceiling: usize,
        walls: Vec<WallFace>,
        footprint: Vec<Vec2>,
    ) -> Self {
        let (ex, ez) = horizontal_basis(&planes[floor].normal);
        Self {
            planes,
            floor,
            ceiling,
            walls,
            footprint,
            ex,
            ez,
        }
    }

    pub fn to_2d(&self, x: &Vec3) -> Vec2 {
        Vec2::new(self.ex.dot(x), self.ez.dot(x))
    }

    /// True when `x` lies strictly between floor and ceiling and inside the
    /// footprint.
    pub fn contains(&self, x: &Vec3) -> bool {
        self.planes[self.floor].signed_distance(x) > 0.0
            && self.planes[self.ceiling].signed_distance(x) > 0.0
            && (self.footprint.is_empty() || point_in_polygon(&self.to_2d(x), &self.footprint, 0.0))
    }

    fn accepts(&self, plane: usize, x: &Vec3) -> bool {
        if plane == self.floor || plane == self.ceiling {
            return self.footprint.is_empty()
                || point_in_polygon(&self.to_2d(x), &self.footprint, FACE_TOL);
        }
        let between = self.planes[self.floor].signed_distance(x) >= -FACE_TOL
            && self.planes[self.ceiling].signed_distance(x) >= -FACE_TOL;
        if !between {
            return false;
        }
        let p = self.to_2d(x);
        self.walls.iter().filter(|w| w.plane == plane).any(|w| {
            let ab = w.b - w.a;
            let len = ab.norm();
            let s = (p - w.a).dot(&ab) / len;
            s >= -FACE_TOL && s <= len + FACE_TOL
        })
    }

    /// Nearest accepted face along `origin + s·dir`, as `(plane index, s)`.
    /// Ties within `1e-12` go to the lower plane index.
    pub fn raycast(&self, origin: &Vec3, dir: &Vec3) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (k, plane) in self.planes.iter().enumerate() {
            let Some(s) = plane.ray_hit(origin, dir) else {
                continue;
            };
            if let Some((_, bs)) = best {
                if s >= bs - 1e-12 {
                    continue;
                }
            }
            let x = origin + dir * s;
            if self.accepts(k, &x) {
                best = Some((k, s));
            }
        }
        best
    }

    /// Renders `(depth, plane-id)` maps for a camera. Depth is the camera-frame
    /// `z`; pixels without a hit get depth 0 and label `-1`.
    pub fn render(
        &self,
        pose: &PoseSE3,
        k: &Intrinsics,
        width: usize,
        height: usize,
    ) -> (ScalarMap, LabelMap) {
        let origin = pose.center();
        let rows: Vec<Vec<(f64, i32)>> = (0..height)
            .into_par_iter()
            .map(|row| {
                (0..width)
                    .map(|col| {
                        let dir = pose.transform_vector(&k.ray(col as f64, row as f64));
                        match self.raycast(&origin, &dir) {
                            Some((plane, s)) => (s, plane as i32),
                            None => (0.0, LabelMap::NONE),
                        }
                    })
                    .collect()
            })
            .collect();
        let (depth, labels): (Vec<f64>, Vec<i32>) = rows.into_iter().flatten().unzip();
        (
            ScalarMap::new(width, height, depth).expect("sized"),
            LabelMap::new(width, height, labels).expect("sized"),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Mat3, SemanticClass};

    fn box_room() -> RoomModel {
        // 4 x 4 footprint centred at the origin, floor y = 0, ceiling y = 3.
        let planes = vec![
            Plane::new(Vec3::y(), 0.0, SemanticClass::Floor).unwrap(),
            Plane::new(-Vec3::y(), 3.0, SemanticClass::Ceiling).unwrap(),
            Plane::wall(Vec3::x(), 2.0),
            Plane::wall(-Vec3::x(), 2.0),
            Plane::wall(Vec3::z(), 2.0),
            Plane::wall(-Vec3::z(), 2.0),
        ];
        let room = RoomModel::new(planes, 0, 1, vec![], vec![]);
        let c = |x: f64, z: f64| Vec2::new(room.ex.dot(&Vec3::new(x, 0.0, z)), room.ez.dot(&Vec3::new(x, 0.0, z)));
        let corners = [c(-2.0, -2.0), c(2.0, -2.0), c(2.0, 2.0), c(-2.0, 2.0)];
        let walls = vec![
            WallFace { plane: 2, a: corners[3], b: corners[0] },
            WallFace { plane: 3, a: corners[1], b: corners[2] },
            WallFace { plane: 4, a: corners[0], b: corners[1] },
            WallFace { plane: 5, a: corners[2], b: corners[3] },
        ];
        RoomModel { walls, footprint: corners.to_vec(), ..room }
    }

    #[test]
    fn closed_box_has_hit_everywhere() {
        let room = box_room();
        // Looking along +z from the centre, camera y down = world -y.
        let pose = PoseSE3::new(Mat3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0), Vec3::new(0.0, 1.5, 0.0)).unwrap();
        let k = Intrinsics::new(5.0, 5.0, 16.0, 12.0).unwrap();
        let (depth, labels) = room.render(&pose, &k, 32, 24);
        assert!(labels.data.iter().all(|&l| l >= 0));
        assert_eq!(depth.get(12, 16), 2.0);
        assert_eq!(labels.get(12, 16), 5);
        assert_eq!(labels.get(23, 16), 0);
        assert_eq!(labels.get(0, 16), 1);
    }

    #[test]
    fn contains_checks_all_bounds() {
        let room = box_room();
        assert!(room.contains(&Vec3::new(0.0, 1.0, 0.0)));
        assert!(!room.contains(&Vec3::new(0.0, 3.5, 0.0)));
        assert!(!room.contains(&Vec3::new(2.5, 1.0, 0.0)));
    }
}
