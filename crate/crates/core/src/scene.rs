//! Synthetic rectilinear rooms and the structural-plane renderer that stands
//! in for the 2D plane detector and the pointmap regression network.
//!
//! World frame: `y` up, floor at `y = 0`, ceiling at `y = ceiling_height`,
//! footprint in the `x`-`z` plane. Plane ids are `0` floor, `1` ceiling and
//! `2 + k` for the wall on footprint edge `k`.

use crate::geom::{
    backproject, point_segment_distance_2d, so3_exp, GeomError, Intrinsics, LabelMap, Mat3,
    Plane, Pointmap, PoseSE3, ScalarMap, SemanticClass, Vec2, Vec3,
};
use crate::room::{RoomModel, WallFace};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Smallest spacing between distinct parallel wall lines, in meters.
pub const MIN_WALL_SPACING: f64 = 0.7;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("camera {index} is outside the room")]
    CameraOutside { index: usize },
    #[error("camera index {index} out of range ({count} cameras)")]
    CameraIndex { index: usize, count: usize },
    #[error("invalid view pair ({0}, {1})")]
    Pair(usize, usize),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub wall_count: usize,
    /// Nominal footprint side length in meters.
    pub room_extent: f64,
    pub ceiling_height: f64,
    pub camera_count: usize,
    /// Standard deviation of per-coordinate pointmap noise, meters.
    pub noise_sigma: f64,
    pub seed: u64,
    pub image_width: usize,
    pub image_height: usize,
    /// Focal length in pixels (`fx = fy`).
    pub focal: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            wall_count: 4,
            room_extent: 6.0,
            ceiling_height: 2.8,
            camera_count: 3,
            noise_sigma: 0.0,
            seed: 0,
            image_width: 160,
            image_height: 120,
            focal: 64.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.wall_count < 4 || self.wall_count > 12 || self.wall_count % 2 != 0 {
            return Err(SceneError::Spec(format!(
                "wall_count must be even and in [4, 12] for a rectilinear footprint, got {}",
                self.wall_count
            )));
        }
        if !(self.room_extent >= 3.0) {
            return Err(SceneError::Spec(format!(
                "room_extent must be at least 3 m, got {}",
                self.room_extent
            )));
        }
        if !(self.ceiling_height > 0.0) {
            return Err(SceneError::Spec("ceiling_height must be positive".into()));
        }
        if self.camera_count == 0 {
            return Err(SceneError::Spec("camera_count must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(SceneError::Spec("noise_sigma must be non-negative".into()));
        }
        if self.image_width < 8 || self.image_height < 8 || !(self.focal > 0.0) {
            return Err(SceneError::Spec("image must be at least 8x8 with positive focal".into()));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: (self.image_width / 2) as f64,
            cy: (self.image_height / 2) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub pose: PoseSE3,
    pub intrinsics: Intrinsics,
    pub width: usize,
    pub height: usize,
}

/// Ground-truth room: planes, plane adjacency and cameras.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub planes: Vec<Plane>,
    pub adjacency: Vec<Vec<bool>>,
    pub cameras: Vec<Camera>,
    /// Footprint polygon `(x, z)`; wall `k` runs from vertex `k` to `k + 1`.
    pub footprint: Vec<Vec2>,
    pub ceiling_height: f64,
}

impl Scene {
    /// Assembles a scene from a simple rectilinear footprint. Vertex order may
    /// be either orientation; wall normals always face the interior.
    pub fn from_footprint(
        footprint: Vec<Vec2>,
        ceiling_height: f64,
        cameras: Vec<Camera>,
    ) -> Self {
        let n = footprint.len();
        let area2: f64 = (0..n)
            .map(|i| {
                let (a, b) = (footprint[i], footprint[(i + 1) % n]);
                a.x * b.y - b.x * a.y
            })
            .sum();
        let mut planes = vec![
            Plane::new(Vec3::y(), 0.0, SemanticClass::Floor).expect("unit"),
            Plane::new(-Vec3::y(), ceiling_height, SemanticClass::Ceiling).expect("unit"),
        ];
        for i in 0..n {
            let (a, b) = (footprint[i], footprint[(i + 1) % n]);
            let e = (b - a).normalize();
            // Left normal faces inward for a counter-clockwise polygon.
            let mut n2 = Vec2::new(-e.y, e.x);
            if area2 < 0.0 {
                n2 = -n2;
            }
            let normal = Vec3::new(n2.x, 0.0, n2.y);
            planes.push(Plane::wall(normal, -n2.dot(&a)));
        }
        let m = planes.len();
        let mut adjacency = vec![vec![false; m]; m];
        for w in 0..n {
            for fc in [0, 1] {
                adjacency[fc][w + 2] = true;
                adjacency[w + 2][fc] = true;
            }
            let next = (w + 1) % n + 2;
            adjacency[w + 2][next] = true;
            adjacency[next][w + 2] = true;
        }
        Self {
            planes,
            adjacency,
            cameras,
            footprint,
            ceiling_height,
        }
    }

    pub fn wall_count(&self) -> usize {
        self.footprint.len()
    }

    /// Wall plane ids, in footprint order.
    pub fn wall_ids(&self) -> std::ops::Range<usize> {
        2..2 + self.footprint.len()
    }

    pub fn room_model(&self) -> RoomModel {
        let room = RoomModel::new(self.planes.clone(), 0, 1, Vec::new(), Vec::new());
        let to2d = |p: &Vec2| room.to_2d(&Vec3::new(p.x, 0.0, p.y));
        let n = self.footprint.len();
        let walls = (0..n)
            .map(|k| WallFace {
                plane: k + 2,
                a: to2d(&self.footprint[k]),
                b: to2d(&self.footprint[(k + 1) % n]),
            })
            .collect();
        let footprint = self.footprint.iter().map(to2d).collect();
        RoomModel {
            walls,
            footprint,
            ..room
        }
    }

    pub fn camera(&self, index: usize) -> Result<&Camera, SceneError> {
        self.cameras.get(index).ok_or(SceneError::CameraIndex {
            index,
            count: self.cameras.len(),
        })
    }
}

/// Ray-casts the structural surfaces seen by camera `cam_index`.
pub fn render_structural_depth(
    scene: &Scene,
    cam_index: usize,
) -> Result<(ScalarMap, LabelMap), SceneError> {
    let cam = scene.camera(cam_index)?;
    let room = scene.room_model();
    if !room.contains(&cam.pose.center()) {
        return Err(SceneError::CameraOutside { index: cam_index });
    }
    Ok(room.render(&cam.pose, &cam.intrinsics, cam.width, cam.height))
}

/// Camera-to-world pose looking along `yaw` (about world `y`), tilted by
/// `pitch` (positive looks up) and rolled by `roll` about the optical axis.
pub fn look_pose(center: Vec3, yaw: f64, pitch: f64, roll: f64) -> PoseSE3 {
    let forward = Vec3::new(pitch.cos() * yaw.sin(), pitch.sin(), pitch.cos() * yaw.cos());
    let down = -Vec3::y();
    let right = down.cross(&forward).normalize();
    let down = forward.cross(&right);
    let r = Mat3::from_columns(&[right, down, forward]);
    let r = so3_exp(&(forward * roll)) * r;
    PoseSE3 {
        rotation: r,
        translation: center,
    }
}

fn rectilinear_footprint(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Vec2> {
    let e = spec.room_extent;
    let notches = (spec.wall_count - 4) / 2;
    loop {
        let w = e * rng.random_range(0.8..1.2);
        let d = e * rng.random_range(0.8..1.2);
        let mut corners = [0usize, 1, 2, 3];
        corners.shuffle(rng);
        let mut sizes = [None; 4];
        for &c in &corners[..notches] {
            sizes[c] = Some((w * rng.random_range(0.15..0.4), d * rng.random_range(0.15..0.4)));
        }
        let mut xs = vec![0.0, w];
        let mut zs = vec![0.0, d];
        let mut poly = Vec::with_capacity(spec.wall_count);
        // Corners in counter-clockwise order: (0,0), (w,0), (w,d), (0,d).
        for (c, size) in sizes.iter().enumerate() {
            let Some((a, b)) = *size else {
                poly.push(match c {
                    0 => Vec2::new(0.0, 0.0),
                    1 => Vec2::new(w, 0.0),
                    2 => Vec2::new(w, d),
                    _ => Vec2::new(0.0, d),
                });
                continue;
            };
            let pts = match c {
                0 => [(0.0, b), (a, b), (a, 0.0)],
                1 => [(w - a, 0.0), (w - a, b), (w, b)],
                2 => [(w, d - b), (w - a, d - b), (w - a, d)],
                _ => [(a, d), (a, d - b), (0.0, d - b)],
            };
            xs.push(pts[1].0);
            zs.push(pts[1].1);
            poly.extend(pts.iter().map(|&(x, z)| Vec2::new(x, z)));
        }
        let spaced = |v: &mut Vec<f64>| {
            v.sort_by(f64::total_cmp);
            v.windows(2).all(|p| p[1] - p[0] >= MIN_WALL_SPACING)
        };
        if !spaced(&mut xs) || !spaced(&mut zs) {
            continue;
        }
        let angle = rng.random_range(0.0..PI / 2.0);
        let (s, c) = angle.sin_cos();
        return poly
            .into_iter()
            .map(|p| {
                let q = p - Vec2::new(w / 2.0, d / 2.0);
                Vec2::new(c * q.x - s * q.y, s * q.x + c * q.y)
            })
            .collect();
    }
}

fn sample_camera(
    spec: &SceneSpec,
    footprint: &[Vec2],
    yaw_base: f64,
    rng: &mut ChaCha8Rng,
) -> Camera {
    let (lo, hi) = footprint.iter().fold(
        (Vec2::repeat(f64::INFINITY), Vec2::repeat(f64::NEG_INFINITY)),
        |(lo, hi), p| (lo.inf(p), hi.sup(p)),
    );
    let n = footprint.len();
    let center = loop {
        let p = Vec2::new(rng.random_range(lo.x..hi.x), rng.random_range(lo.y..hi.y));
        let inside = crate::geom::point_in_polygon(&p, footprint, 0.0);
        let clear = (0..n).all(|k| {
            point_segment_distance_2d(&p, &footprint[k], &footprint[(k + 1) % n]) >= 0.5
        });
        if inside && clear {
            break p;
        }
    };
    let height = rng.random_range(0.43..0.64) * spec.ceiling_height;
    let yaw = yaw_base + rng.random_range(-0.4..0.4);
    let pitch = rng.random_range(-10f64..10.0).to_radians();
    let roll = rng.random_range(-3f64..3.0).to_radians();
    Camera {
        pose: look_pose(Vec3::new(center.x, height, center.y), yaw, pitch, roll),
        intrinsics: spec.intrinsics(),
        width: spec.image_width,
        height: spec.image_height,
    }
}

/// Pixels per wall id seen by a low-resolution render of each camera.
fn coverage(scene: &Scene, factor: usize) -> Vec<Vec<usize>> {
    let room = scene.room_model();
    scene
        .cameras
        .iter()
        .map(|cam| {
            let k = cam.intrinsics.scaled(1.0 / factor as f64);
            let (_, labels) = room.render(&cam.pose, &k, cam.width / factor, cam.height / factor);
            let mut counts = vec![0usize; scene.planes.len()];
            for &l in &labels.data {
                if l >= 0 {
                    counts[l as usize] += 1;
                }
            }
            counts
        })
        .collect()
}

/// Generates a rectilinear room with cameras placed so that, when possible,
/// every wall is well observed by at least one camera and every camera sees
/// the floor and at least two walls.
pub fn generate_room(spec: &SceneSpec) -> Result<Scene, SceneError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let footprint = rectilinear_footprint(spec, &mut rng);
    // Coverage is judged on a 4x downsampled render; 8 coarse pixels are
    // roughly 128 full-resolution pixels.
    const FACTOR: usize = 4;
    const MIN_COARSE: usize = 8;
    let mut best: Option<(usize, Scene)> = None;
    for _ in 0..400 {
        let yaw0 = rng.random_range(0.0..2.0 * PI);
        let cameras = (0..spec.camera_count)
            .map(|k| {
                let base = yaw0 + 2.0 * PI * k as f64 / spec.camera_count as f64;
                sample_camera(spec, &footprint, base, &mut rng)
            })
            .collect();
        let scene = Scene::from_footprint(footprint.clone(), spec.ceiling_height, cameras);
        let cov = coverage(&scene, FACTOR);
        let per_camera_ok = cov.iter().all(|c| {
            c[0] >= MIN_COARSE
                && scene.wall_ids().filter(|&w| c[w] >= MIN_COARSE).count() >= 2
        });
        let covered = scene
            .wall_ids()
            .filter(|&w| cov.iter().any(|c| c[w] >= MIN_COARSE))
            .count();
        let score = covered + if per_camera_ok { 1 } else { 0 };
        if per_camera_ok && covered == scene.wall_count() {
            return Ok(scene);
        }
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, scene));
        }
    }
    let (_, scene) = best.expect("at least one attempt");
    log::warn!(
        "seed {}: no camera placement covers every wall; using best attempt",
        spec.seed
    );
    Ok(scene)
}

/// One network-pair output: both pointmaps expressed in camera `image_id`'s
/// frame, their confidences, and the plane masks of `image_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBundle {
    pub image_id: usize,
    pub partner_id: usize,
    /// Pointmap of `image_id` in its own frame.
    pub pointmap_self: Pointmap,
    /// Pointmap of `partner_id` expressed in `image_id`'s frame.
    pub pointmap_other: Pointmap,
    pub confidence_self: ScalarMap,
    pub confidence_other: ScalarMap,
    pub plane_masks: LabelMap,
}

/// All ordered pairs `(i, j)`, `i != j`.
pub fn all_ordered_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect()
}

fn noisy_copy(pm: &Pointmap, sigma: f64, rng: &mut ChaCha8Rng) -> (Pointmap, ScalarMap) {
    let mut out = pm.clone();
    let mut conf = ScalarMap::filled(pm.width, pm.height, 1.0);
    if sigma == 0.0 {
        return (out, conf);
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    for i in 0..pm.len() {
        if !pm.valid[i] {
            continue;
        }
        let e = Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
        out.points[i] += e;
        conf.data[i] = (1.0 / (1.0 + e.norm() / sigma)).clamp(0.1, 1.0);
    }
    (out, conf)
}

/// Emits one [`ViewBundle`] per ordered pair, with isotropic Gaussian noise of
/// standard deviation `noise_sigma` on every coordinate. Deterministic given
/// `seed`.
pub fn emit_view_bundles(
    scene: &Scene,
    pairing: &[(usize, usize)],
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<ViewBundle>, SceneError> {
    let n = scene.cameras.len();
    for &(i, j) in pairing {
        if i == j || i >= n || j >= n {
            return Err(SceneError::Pair(i, j));
        }
    }
    let mut renders = Vec::with_capacity(n);
    for c in 0..n {
        let (depth, mask) = render_structural_depth(scene, c)?;
        let pm = backproject(&depth, &scene.cameras[c].intrinsics)?;
        renders.push((pm, mask));
    }
    pairing
        .iter()
        .map(|&(i, j)| {
            let pair_seed = seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(((i as u64) << 32) | j as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(pair_seed);
            let rel = scene.cameras[i]
                .pose
                .inverse()
                .compose(&scene.cameras[j].pose);
            let other = renders[j].0.transformed(&rel);
            let (pointmap_self, confidence_self) = noisy_copy(&renders[i].0, noise_sigma, &mut rng);
            let (pointmap_other, confidence_other) = noisy_copy(&other, noise_sigma, &mut rng);
            Ok(ViewBundle {
                image_id: i,
                partner_id: j,
                pointmap_self,
                pointmap_other,
                confidence_self,
                confidence_other,
                plane_masks: renders[i].1.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{fit_plane, plane_intersection};

    fn spec(walls: usize, cams: usize, seed: u64) -> SceneSpec {
        SceneSpec {
            wall_count: walls,
            camera_count: cams,
            seed,
            ..SceneSpec::default()
        }
    }

    /// Box room `[-2, 2]²`, camera at the centre looking at the wall `z = 2`.
    pub(crate) fn centred_box() -> Scene {
        let fp = [(-2.0, -2.0), (2.0, -2.0), (2.0, 2.0), (-2.0, 2.0)]
            .iter()
            .map(|&(x, z)| Vec2::new(x, z))
            .collect();
        let cam = Camera {
            pose: look_pose(Vec3::new(0.0, 1.4, 0.0), 0.0, 0.0, 0.0),
            intrinsics: Intrinsics::new(64.0, 64.0, 80.0, 60.0).unwrap(),
            width: 160,
            height: 120,
        };
        Scene::from_footprint(fp, 2.8, vec![cam])
    }

    #[test]
    fn rejects_non_rectilinear_wall_counts() {
        for walls in [3, 5, 14, 2] {
            let err = generate_room(&spec(walls, 1, 0)).unwrap_err();
            assert!(err.to_string().contains("rectilinear"), "{err}");
        }
    }

    #[test]
    fn box_room_topology() {
        let scene = generate_room(&spec(4, 2, 3)).unwrap();
        assert_eq!(scene.planes.len(), 6);
        assert_eq!(scene.planes.iter().filter(|p| p.class == SemanticClass::Floor).count(), 1);
        assert_eq!(scene.planes.iter().filter(|p| p.class == SemanticClass::Ceiling).count(), 1);
        for w in scene.wall_ids() {
            let row = &scene.adjacency[w];
            assert!(row[0] && row[1]);
            assert_eq!(scene.wall_ids().filter(|&v| row[v]).count(), 2);
            assert!(scene.planes[w].normal.dot(&Vec3::y()).abs() < 1e-12);
        }
        assert!(!scene.adjacency[0][1]);
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_room(&spec(8, 3, 42)).unwrap();
        let b = generate_room(&spec(8, 3, 42)).unwrap();
        assert_eq!(a, b);
        let ba = emit_view_bundles(&a, &all_ordered_pairs(3), 0.05, 1).unwrap();
        let bb = emit_view_bundles(&b, &all_ordered_pairs(3), 0.05, 1).unwrap();
        assert_eq!(ba, bb);
    }

    /// Two walls are adjacent iff the corner where their lines cross lies on
    /// both closed wall segments.
    fn brute_force_adjacency(scene: &Scene) -> Vec<Vec<bool>> {
        let m = scene.planes.len();
        let n = scene.wall_count();
        let mut adj = vec![vec![false; m]; m];
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                let (pi, pj) = (&scene.planes[i], &scene.planes[j]);
                let Ok(line) = plane_intersection(pi, pj) else { continue };
                // Sample the line at mid-height and test it against both faces.
                let s = (scene.ceiling_height / 2.0 - line.point.y) / line.direction.y;
                let x = if line.direction.y.abs() > 0.5 { line.point + line.direction * s } else { line.point };
                let on_face = |k: usize, x: &Vec3| -> bool {
                    if k < 2 {
                        // Floor/ceiling lines are horizontal; check the wall side only.
                        return true;
                    }
                    let w = k - 2;
                    let a = scene.footprint[w];
                    let b = scene.footprint[(w + 1) % n];
                    let p = Vec2::new(x.x, x.z);
                    point_segment_distance_2d(&p, &a, &b) < 1e-9
                };
                if i < 2 && j < 2 {
                    continue;
                }
                if i < 2 || j < 2 {
                    adj[i][j] = true;
                    continue;
                }
                adj[i][j] = on_face(i, &x) && on_face(j, &x);
            }
        }
        adj
    }

    #[test]
    fn l_shaped_adjacency_matches_brute_force() {
        for seed in 0..10 {
            let scene = generate_room(&spec(6, 2, seed)).unwrap();
            assert_eq!(scene.wall_count(), 6);
            assert_eq!(scene.adjacency, brute_force_adjacency(&scene), "seed {seed}");
        }
        for walls in [8, 10, 12] {
            let scene = generate_room(&spec(walls, 2, 7)).unwrap();
            assert_eq!(scene.adjacency, brute_force_adjacency(&scene));
        }
    }

    #[test]
    fn principal_pixel_hits_facing_wall() {
        let scene = centred_box();
        let (depth, mask) = render_structural_depth(&scene, 0).unwrap();
        assert!((depth.get(60, 80) - 2.0).abs() < 1e-12);
        // Wall on edge (2,2)->(-2,2) is z = 2, footprint edge 2.
        assert_eq!(mask.get(60, 80), 4);
        assert!(mask.data.iter().all(|&l| l >= 0));
        assert!(depth.data.iter().all(|&d| d > 0.0));
    }

    #[test]
    fn camera_outside_is_an_error() {
        let mut scene = centred_box();
        scene.cameras[0].pose.translation = Vec3::new(5.0, 1.0, 0.0);
        assert!(matches!(render_structural_depth(&scene, 0), Err(SceneError::CameraOutside { index: 0 })));
        assert!(matches!(render_structural_depth(&scene, 3), Err(SceneError::CameraIndex { .. })));
    }

    #[test]
    fn rendered_points_lie_on_their_planes() {
        for walls in [4, 6, 10] {
            let scene = generate_room(&spec(walls, 3, 17)).unwrap();
            for c in 0..3 {
                let (depth, mask) = render_structural_depth(&scene, c).unwrap();
                let pm = backproject(&depth, &scene.cameras[c].intrinsics).unwrap();
                let pose = scene.cameras[c].pose;
                assert_eq!(pm.valid_count(), pm.len());
                for (i, p) in pm.iter_valid() {
                    let plane = scene.planes[mask.data[i] as usize];
                    assert!(plane.signed_distance(&pose.transform_point(p)).abs() < 1e-6);
                }
                // Round trip: fitting every mask recovers its plane.
                for id in mask.labels() {
                    let pts: Vec<Vec3> = pm
                        .iter_valid()
                        .filter(|(i, _)| mask.data[*i] == id)
                        .map(|(_, p)| pose.transform_point(p))
                        .collect();
                    if pts.len() < 50 {
                        continue;
                    }
                    let Ok(fit) = fit_plane(&pts, None) else { continue };
                    let truth = scene.planes[id as usize];
                    let fit = fit.plane.oriented_toward(&pose.center());
                    assert!((fit.normal - truth.normal).norm() < 1e-6);
                    assert!((fit.offset - truth.offset).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn generated_cameras_cover_every_wall() {
        for (walls, cams, seed) in [(4, 2, 1), (6, 2, 2), (8, 3, 3), (12, 5, 4)] {
            let scene = generate_room(&spec(walls, cams, seed)).unwrap();
            let cov = coverage(&scene, 1);
            for w in scene.wall_ids() {
                assert!(cov.iter().any(|c| c[w] >= 100), "walls={walls} wall {w} unseen");
            }
        }
    }

    #[test]
    fn noiseless_partner_points_match_gt_geometry() {
        let scene = generate_room(&spec(6, 2, 5)).unwrap();
        let bundles = emit_view_bundles(&scene, &[(0, 1)], 0.0, 0).unwrap();
        let b = &bundles[0];
        let (depth1, _) = render_structural_depth(&scene, 1).unwrap();
        let own1 = backproject(&depth1, &scene.cameras[1].intrinsics).unwrap();
        let to_cam1 = scene.cameras[1].pose.inverse().compose(&scene.cameras[0].pose);
        for (i, p) in b.pointmap_other.iter_valid() {
            assert!((to_cam1.transform_point(p) - own1.points[i]).norm() < 1e-9);
        }
        assert!(b.confidence_self.data.iter().all(|&c| c == 1.0));
        assert!(matches!(emit_view_bundles(&scene, &[(1, 1)], 0.0, 0), Err(SceneError::Pair(1, 1))));
    }

    #[test]
    fn noise_statistics() {
        let scene = generate_room(&spec(4, 3, 9)).unwrap();
        let clean = emit_view_bundles(&scene, &all_ordered_pairs(3), 0.0, 0).unwrap();
        let noisy = emit_view_bundles(&scene, &all_ordered_pairs(3), 0.01, 77).unwrap();
        let (mut sum, mut count) = (0.0, 0usize);
        for (c, n) in clean.iter().zip(&noisy) {
            for (a, b) in [(&c.pointmap_self, &n.pointmap_self), (&c.pointmap_other, &n.pointmap_other)] {
                for (i, p) in a.iter_valid() {
                    sum += (b.points[i] - p).norm_squared();
                    count += 1;
                }
            }
            assert!(n.confidence_self.data.iter().all(|&x| (0.1..=1.0).contains(&x)));
        }
        assert!(count >= 100_000);
        let rms = (sum / count as f64).sqrt();
        assert!(rms >= 0.009 * 3f64.sqrt() && rms <= 0.011 * 3f64.sqrt(), "rms {rms}");
    }
}
