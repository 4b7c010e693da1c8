//! Global alignment of pairwise pointmaps.
//!
//! Each bundle `e = (n, m)` holds the pointmaps of views `n` and `m`, both in
//! camera `n`'s frame. The aligner solves
//!
//! ```text
//! min  Σ_e Σ_{v ∈ e} Σ_i C_i^{v,e} ‖χ_i^v − σ_e (R_n X_i^{v,e} + t_n)‖²
//! ```
//!
//! over world pointmaps `χ`, per-view poses `(R_n, t_n)` and per-bundle scales
//! `σ_e` with `∏ σ_e = 1`. The lowest image id is the anchor and keeps the
//! identity pose.

use crate::geom::{so3_exp, Mat3, Pointmap, PoseSE3, Vec3};
use crate::scene::ViewBundle;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("no bundles to align")]
    Empty,
    #[error("view graph is disconnected: {0:?}")]
    Disconnected(Vec<Vec<usize>>),
    #[error("view {0} is never the reference image of a bundle")]
    MissingSelfPointmap(usize),
    #[error("bundle {index} has mismatched map sizes")]
    Shape { index: usize },
    #[error("scale {value} of bundle {index} is not positive")]
    NonPositiveScale { index: usize, value: f64 },
    #[error("state does not match the bundles: {0}")]
    StateMismatch(String),
    #[error("too few shared points to register view {0}")]
    Registration(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

/// Views, undirected confidence-weighted edges and a maximum-confidence
/// spanning forest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewGraph {
    pub vertices: Vec<usize>,
    pub edges: Vec<GraphEdge>,
    /// Indices into `edges`.
    pub mst_edges: Vec<usize>,
    pub components: Vec<Vec<usize>>,
}

impl ViewGraph {
    pub fn is_connected(&self) -> bool {
        self.components.len() <= 1
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }
    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut x = x;
        while self.0[x] != r {
            let next = self.0[x];
            self.0[x] = r;
            x = next;
        }
        r
    }
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.0[ra.max(rb)] = ra.min(rb);
        true
    }
}

fn mean_confidence(b: &ViewBundle) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (pm, c) in [(&b.pointmap_self, &b.confidence_self), (&b.pointmap_other, &b.confidence_other)] {
        for (i, _) in pm.iter_valid() {
            sum += c.data[i];
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Edge weight = mean confidence of both maps (averaged over the two
/// directions when both are present); the spanning forest maximises total
/// weight, ties broken by vertex pair.
pub fn build_view_graph(bundles: &[ViewBundle]) -> Result<ViewGraph, AlignError> {
    if bundles.is_empty() {
        return Err(AlignError::Empty);
    }
    let vertices: Vec<usize> = bundles
        .iter()
        .flat_map(|b| [b.image_id, b.partner_id])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut acc: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for b in bundles {
        if b.image_id == b.partner_id {
            continue;
        }
        let key = (b.image_id.min(b.partner_id), b.image_id.max(b.partner_id));
        let e = acc.entry(key).or_insert((0.0, 0));
        e.0 += mean_confidence(b);
        e.1 += 1;
    }
    let edges: Vec<GraphEdge> = acc
        .into_iter()
        .map(|((a, b), (s, n))| GraphEdge { a, b, weight: s / n as f64 })
        .collect();
    let (mst_edges, components) = spanning_forest(&vertices, &edges);
    if components.len() > 1 {
        log::warn!("view graph has {} components", components.len());
    }
    Ok(ViewGraph {
        vertices,
        edges,
        mst_edges,
        components,
    })
}

fn spanning_forest(vertices: &[usize], edges: &[GraphEdge]) -> (Vec<usize>, Vec<Vec<usize>>) {
    let pos = |v: usize| vertices.binary_search(&v).expect("known vertex");
    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.sort_by(|&x, &y| {
        edges[y]
            .weight
            .total_cmp(&edges[x].weight)
            .then((edges[x].a, edges[x].b).cmp(&(edges[y].a, edges[y].b)))
    });
    let mut uf = UnionFind::new(vertices.len());
    let mut mst = Vec::new();
    for k in order {
        if uf.union(pos(edges[k].a), pos(edges[k].b)) {
            mst.push(k);
        }
    }
    mst.sort_unstable();
    let mut comps: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &v) in vertices.iter().enumerate() {
        comps.entry(uf.find(i)).or_default().push(v);
    }
    (mst, comps.into_values().collect())
}

/// Weighted similarity fit `dst ≈ c R src + t`.
pub fn umeyama(src: &[Vec3], dst: &[Vec3], weights: &[f64]) -> Option<(f64, Mat3, Vec3)> {
    let wsum: f64 = weights.iter().sum();
    if src.len() < 3 || !(wsum > 0.0) {
        return None;
    }
    let mu_s = src.iter().zip(weights).map(|(p, w)| p * *w).sum::<Vec3>() / wsum;
    let mu_d = dst.iter().zip(weights).map(|(p, w)| p * *w).sum::<Vec3>() / wsum;
    let mut cov = Mat3::zeros();
    let mut var_s = 0.0;
    for ((s, d), w) in src.iter().zip(dst).zip(weights) {
        let (a, b) = (s - mu_s, d - mu_d);
        cov += (b * a.transpose()) * *w;
        var_s += w * a.norm_squared();
    }
    cov /= wsum;
    var_s /= wsum;
    if !(var_s > 0.0) {
        return None;
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut d = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    let c = (svd.singular_values.component_mul(&d.diagonal())).sum() / var_s;
    Some((c, r, mu_d - r * mu_s * c))
}

/// First bundle (in input order) whose reference image is each view.
pub fn canonical_bundles(bundles: &[ViewBundle]) -> BTreeMap<usize, usize> {
    let mut out = BTreeMap::new();
    for (k, b) in bundles.iter().enumerate() {
        out.entry(b.image_id).or_insert(k);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentState {
    /// Sorted image ids; index `k` in the per-view vectors is `views[k]`.
    pub views: Vec<usize>,
    /// `T_n` per view.
    pub poses: Vec<PoseSE3>,
    /// `σ_e` per bundle, in bundle order.
    pub scales: Vec<f64>,
    /// `χ^v` per view, on view `v`'s pixel grid.
    pub global_pointmaps: Vec<Pointmap>,
}

impl AlignmentState {
    pub fn view_index(&self, image_id: usize) -> Option<usize> {
        self.views.binary_search(&image_id).ok()
    }

    /// World similarity for points in the frame of bundle `e`'s reference:
    /// `x ↦ σ_e (R_n x + t_n)`.
    pub fn bundle_to_world(&self, bundle: usize, image_id: usize) -> Option<(f64, PoseSE3)> {
        let k = self.view_index(image_id)?;
        Some((self.scales[bundle], self.poses[k]))
    }

    /// Camera-to-world pose of `image_id`, measured in the units of its
    /// canonical bundle.
    pub fn camera_pose(&self, image_id: usize, canonical_bundle: usize) -> Option<PoseSE3> {
        let (s, pose) = self.bundle_to_world(canonical_bundle, image_id)?;
        Some(PoseSE3 {
            rotation: pose.rotation,
            translation: pose.translation * s,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub objective: f64,
    pub scale_product: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    pub iterations: usize,
    pub objective: f64,
    /// Gradient norm per unit confidence weight.
    pub gradient_norm: f64,
    pub converged: bool,
    pub history: Vec<IterationRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignOptions {
    pub max_iters: usize,
    /// Initial step multiplier for the preconditioned direction.
    pub lr: f64,
    pub tol: f64,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            lr: 1.0,
            tol: 1e-10,
        }
    }
}

/// One valid pixel observation: view slot, pixel, point, confidence.
#[derive(Debug, Clone, Copy)]
struct Obs {
    view: usize,
    pixel: usize,
    x: Vec3,
    c: f64,
}

/// Flattened bundles, shared by objective, gradient and optimiser.
struct Problem {
    views: Vec<usize>,
    shapes: Vec<(usize, usize)>,
    /// Per bundle: reference slot and observations.
    edges: Vec<(usize, Vec<Obs>)>,
    total_weight: f64,
}

impl Problem {
    fn new(bundles: &[ViewBundle]) -> Result<Self, AlignError> {
        if bundles.is_empty() {
            return Err(AlignError::Empty);
        }
        let views: Vec<usize> = bundles
            .iter()
            .flat_map(|b| [b.image_id, b.partner_id])
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let slot = |v: usize| views.binary_search(&v).expect("known view");
        let mut shapes: Vec<Option<(usize, usize)>> = vec![None; views.len()];
        let mut edges = Vec::with_capacity(bundles.len());
        let mut total_weight = 0.0;
        for (k, b) in bundles.iter().enumerate() {
            let mut obs = Vec::new();
            for (v, pm, c) in [
                (b.image_id, &b.pointmap_self, &b.confidence_self),
                (b.partner_id, &b.pointmap_other, &b.confidence_other),
            ] {
                let s = slot(v);
                let shape = (pm.width, pm.height);
                if c.width != pm.width || c.height != pm.height || *shapes[s].get_or_insert(shape) != shape {
                    return Err(AlignError::Shape { index: k });
                }
                for (i, x) in pm.iter_valid() {
                    obs.push(Obs { view: s, pixel: i, x: *x, c: c.data[i] });
                    total_weight += c.data[i];
                }
            }
            edges.push((slot(b.image_id), obs));
        }
        let shapes = shapes.into_iter().map(|s| s.unwrap_or((0, 0))).collect();
        Ok(Self {
            views,
            shapes,
            edges,
            total_weight,
        })
    }

    fn check(&self, state: &AlignmentState) -> Result<(), AlignError> {
        if state.views != self.views {
            return Err(AlignError::StateMismatch("view ids differ".into()));
        }
        if state.poses.len() != self.views.len() || state.global_pointmaps.len() != self.views.len() {
            return Err(AlignError::StateMismatch("per-view vectors have the wrong length".into()));
        }
        if state.scales.len() != self.edges.len() {
            return Err(AlignError::StateMismatch("one scale per bundle expected".into()));
        }
        for (k, pm) in state.global_pointmaps.iter().enumerate() {
            if (pm.width, pm.height) != self.shapes[k] {
                return Err(AlignError::StateMismatch(format!("χ of view {} has the wrong size", self.views[k])));
            }
        }
        for (index, &value) in state.scales.iter().enumerate() {
            if !(value > 0.0) {
                return Err(AlignError::NonPositiveScale { index, value });
            }
        }
        Ok(())
    }

    fn objective(&self, poses: &[PoseSE3], scales: &[f64], chi: &[Vec<Vec3>]) -> f64 {
        let parts: Vec<f64> = self
            .edges
            .par_iter()
            .zip(scales)
            .map(|((n, obs), &s)| {
                let pose = &poses[*n];
                obs.iter()
                    .map(|o| o.c * (chi[o.view][o.pixel] - (pose.rotation * o.x + pose.translation) * s).norm_squared())
                    .sum::<f64>()
            })
            .collect();
        parts.iter().sum()
    }

    /// Confidence-weighted mean of the predictions; pixels without any
    /// observation stay at the origin and invalid.
    fn closed_form_chi(&self, poses: &[PoseSE3], scales: &[f64]) -> (Vec<Vec<Vec3>>, Vec<Vec<f64>>) {
        let mut num: Vec<Vec<Vec3>> = self.shapes.iter().map(|&(w, h)| vec![Vec3::zeros(); w * h]).collect();
        let mut den: Vec<Vec<f64>> = self.shapes.iter().map(|&(w, h)| vec![0.0; w * h]).collect();
        for ((n, obs), &s) in self.edges.iter().zip(scales) {
            let pose = &poses[*n];
            for o in obs {
                num[o.view][o.pixel] += (pose.rotation * o.x + pose.translation) * (s * o.c);
                den[o.view][o.pixel] += o.c;
            }
        }
        for (nv, dv) in num.iter_mut().zip(&den) {
            for (x, &d) in nv.iter_mut().zip(dv) {
                if d > 0.0 {
                    *x /= d;
                }
            }
        }
        (num, den)
    }

    fn gradient(&self, poses: &[PoseSE3], scales: &[f64], chi: &[Vec<Vec3>], with_chi: bool) -> AlignGradient {
        let per_edge: Vec<(Vec3, Vec3, f64, Vec<(usize, usize, Vec3)>)> = self
            .edges
            .par_iter()
            .zip(scales)
            .map(|((n, obs), &s)| {
                let pose = &poses[*n];
                let (mut gr, mut gt, mut gs) = (Vec3::zeros(), Vec3::zeros(), 0.0);
                let mut gchi = Vec::new();
                for o in obs {
                    let p = pose.rotation * o.x;
                    let q = p + pose.translation;
                    let r = chi[o.view][o.pixel] - q * s;
                    gr += r.cross(&p) * (2.0 * o.c * s);
                    gt -= r * (2.0 * o.c * s);
                    gs -= 2.0 * o.c * s * r.dot(&q);
                    if with_chi {
                        gchi.push((o.view, o.pixel, r * (2.0 * o.c)));
                    }
                }
                (gr, gt, gs, gchi)
            })
            .collect();
        let m = self.views.len();
        let mut g = AlignGradient {
            rotation: vec![Vec3::zeros(); m],
            translation: vec![Vec3::zeros(); m],
            log_scale: Vec::with_capacity(self.edges.len()),
            chi: if with_chi {
                self.shapes.iter().map(|&(w, h)| vec![Vec3::zeros(); w * h]).collect()
            } else {
                Vec::new()
            },
        };
        for ((n, _), (gr, gt, gs, gchi)) in self.edges.iter().zip(per_edge) {
            g.rotation[*n] += gr;
            g.translation[*n] += gt;
            g.log_scale.push(gs);
            for (v, i, d) in gchi {
                g.chi[v][i] += d;
            }
        }
        g
    }

    /// Jacobi preconditioner per view (rotation, translation) and per bundle.
    fn diagonal(&self, poses: &[PoseSE3], scales: &[f64]) -> (Vec<Vec3>, Vec<f64>, Vec<f64>) {
        let m = self.views.len();
        let mut drot = vec![Vec3::zeros(); m];
        let mut dtrans = vec![0.0; m];
        let mut dscale = Vec::with_capacity(self.edges.len());
        for ((n, obs), &s) in self.edges.iter().zip(scales) {
            let pose = &poses[*n];
            let mut ds = 0.0;
            for o in obs {
                let p = pose.rotation * o.x;
                let q = p + pose.translation;
                let w = 2.0 * o.c * s * s;
                let p2 = p.component_mul(&p);
                drot[*n] += Vec3::new(p2.y + p2.z, p2.x + p2.z, p2.x + p2.y) * w;
                dtrans[*n] += w;
                ds += w * q.norm_squared();
            }
            dscale.push(ds);
        }
        (drot, dtrans, dscale)
    }
}

/// Gradient of the alignment objective. Rotation components are with respect
/// to a left perturbation `R ← exp(δ) R`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignGradient {
    pub rotation: Vec<Vec3>,
    pub translation: Vec<Vec3>,
    pub log_scale: Vec<f64>,
    pub chi: Vec<Vec<Vec3>>,
}

fn chi_points(state: &AlignmentState) -> Vec<Vec<Vec3>> {
    state.global_pointmaps.iter().map(|p| p.points.clone()).collect()
}

/// Evaluates the alignment objective at `state`.
pub fn align_objective(state: &AlignmentState, bundles: &[ViewBundle]) -> Result<f64, AlignError> {
    let problem = Problem::new(bundles)?;
    problem.check(state)?;
    Ok(problem.objective(&state.poses, &state.scales, &chi_points(state)))
}

/// Analytic gradient of [`align_objective`] at `state`.
pub fn align_gradient(state: &AlignmentState, bundles: &[ViewBundle]) -> Result<AlignGradient, AlignError> {
    let problem = Problem::new(bundles)?;
    problem.check(state)?;
    Ok(problem.gradient(&state.poses, &state.scales, &chi_points(state), true))
}

fn chi_to_pointmaps(problem: &Problem, chi: Vec<Vec<Vec3>>, den: &[Vec<f64>]) -> Vec<Pointmap> {
    chi.into_iter()
        .zip(den)
        .zip(&problem.shapes)
        .map(|((pts, d), &(w, h))| {
            let valid = d.iter().map(|&x| x > 0.0).collect();
            Pointmap::new(w, h, pts, valid).expect("sized")
        })
        .collect()
}

/// Registration initialisation along the maximum-confidence spanning tree.
pub fn initial_state(bundles: &[ViewBundle], graph: &ViewGraph) -> Result<AlignmentState, AlignError> {
    let problem = Problem::new(bundles)?;
    if !graph.is_connected() {
        return Err(AlignError::Disconnected(graph.components.clone()));
    }
    let canon = canonical_bundles(bundles);
    for &v in &problem.views {
        if !canon.contains_key(&v) {
            return Err(AlignError::MissingSelfPointmap(v));
        }
    }
    let slot = |v: usize| problem.views.binary_search(&v).expect("known view");
    // Similarity from each view's canonical frame to the world: k R x + u.
    let m = problem.views.len();
    let mut sims: Vec<Option<(f64, Mat3, Vec3)>> = vec![None; m];
    sims[0] = Some((1.0, Mat3::identity(), Vec3::zeros()));
    let mut adj: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &k in &graph.mst_edges {
        let e = graph.edges[k];
        adj.entry(e.a).or_default().push(e.b);
        adj.entry(e.b).or_default().push(e.a);
    }
    let mut queue = std::collections::VecDeque::from([problem.views[0]]);
    while let Some(a) = queue.pop_front() {
        for &b in adj.get(&a).map(Vec::as_slice).unwrap_or(&[]) {
            if sims[slot(b)].is_some() {
                continue;
            }
            let (c, r, t) = relative_similarity(bundles, &canon, a, b)?;
            let (ka, ra, ua) = sims[slot(a)].expect("visited");
            sims[slot(b)] = Some((ka * c, ra * r, ra * t * ka + ua));
            queue.push_back(b);
        }
    }
    // Express the similarities through the canonical bundle of each view.
    let mut poses = vec![PoseSE3::identity(); m];
    let mut scales = vec![1.0; bundles.len()];
    for (s, sim) in sims.iter().enumerate() {
        let (k, r, u) = sim.expect("connected graph");
        poses[s] = PoseSE3 {
            rotation: r,
            translation: u / k,
        };
        scales[canon[&problem.views[s]]] = k;
    }
    // χ from the canonical self pointmaps, then least-squares scales for the
    // remaining bundles.
    let mut chi: Vec<Vec<Vec3>> = problem.shapes.iter().map(|&(w, h)| vec![Vec3::zeros(); w * h]).collect();
    let mut seen: Vec<Vec<bool>> = problem.shapes.iter().map(|&(w, h)| vec![false; w * h]).collect();
    for (&v, &e) in &canon {
        let s = slot(v);
        let pose = poses[s];
        for (i, x) in bundles[e].pointmap_self.iter_valid() {
            chi[s][i] = (pose.rotation * x + pose.translation) * scales[e];
            seen[s][i] = true;
        }
    }
    for (e, (n, obs)) in problem.edges.iter().enumerate() {
        if canon[&problem.views[*n]] == e {
            continue;
        }
        let pose = poses[*n];
        let (mut num, mut den) = (0.0, 0.0);
        for o in obs.iter().filter(|o| seen[o.view][o.pixel]) {
            let q = pose.rotation * o.x + pose.translation;
            num += o.c * chi[o.view][o.pixel].dot(&q);
            den += o.c * q.norm_squared();
        }
        if num > 0.0 && den > 0.0 {
            scales[e] = num / den;
        }
    }
    let g = geometric_mean(&scales);
    for s in &mut scales {
        *s /= g;
    }
    let (chi, den) = problem.closed_form_chi(&poses, &scales);
    Ok(AlignmentState {
        views: problem.views.clone(),
        poses,
        scales,
        global_pointmaps: chi_to_pointmaps(&problem, chi, &den),
    })
}

fn geometric_mean(v: &[f64]) -> f64 {
    (v.iter().map(|s| s.ln()).sum::<f64>() / v.len() as f64).exp()
}

/// Similarity mapping view `b`'s canonical frame into view `a`'s canonical
/// frame, from a bundle linking the two.
fn relative_similarity(
    bundles: &[ViewBundle],
    canon: &BTreeMap<usize, usize>,
    a: usize,
    b: usize,
) -> Result<(f64, Mat3, Vec3), AlignError> {
    let direct = bundles.iter().position(|x| x.image_id == a && x.partner_id == b);
    let reverse = bundles.iter().position(|x| x.image_id == b && x.partner_id == a);
    let (e, forward) = match (direct, reverse) {
        (Some(e), _) => (e, true),
        (None, Some(e)) => (e, false),
        (None, None) => return Err(AlignError::Registration(b)),
    };
    let bundle = &bundles[e];
    // Factor taking the bundle's units to the reference view's canonical units.
    let reference = &bundles[canon[&bundle.image_id]].pointmap_self;
    let mu = unit_ratio(reference, &bundle.pointmap_self).ok_or(AlignError::Registration(b))?;
    let (fixed, moving, conf_fixed, conf_moving, scale_moving, scale_fixed);
    if forward {
        // Points of b: own canonical frame -> a's frame.
        fixed = &bundle.pointmap_other;
        conf_fixed = &bundle.confidence_other;
        moving = &bundles[canon[&b]].pointmap_self;
        conf_moving = &bundles[canon[&b]].confidence_self;
        scale_fixed = mu;
        scale_moving = 1.0;
    } else {
        // Points of a: b's frame -> own canonical frame.
        fixed = &bundles[canon[&a]].pointmap_self;
        conf_fixed = &bundles[canon[&a]].confidence_self;
        moving = &bundle.pointmap_other;
        conf_moving = &bundle.confidence_other;
        scale_fixed = 1.0;
        scale_moving = mu;
    }
    let (mut src, mut dst, mut w) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..fixed.len().min(moving.len()) {
        if fixed.valid[i] && moving.valid[i] {
            src.push(moving.points[i] * scale_moving);
            dst.push(fixed.points[i] * scale_fixed);
            w.push(conf_fixed.data[i] * conf_moving.data[i]);
        }
    }
    // Either way `dst ≈ c R src + t` maps b's canonical frame into a's.
    umeyama(&src, &dst, &w).ok_or(AlignError::Registration(b))
}

/// Least-squares factor `μ` with `target ≈ μ source` over shared valid pixels.
fn unit_ratio(target: &Pointmap, source: &Pointmap) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..target.len().min(source.len()) {
        if target.valid[i] && source.valid[i] {
            num += target.points[i].dot(&source.points[i]);
            den += source.points[i].norm_squared();
        }
    }
    (num > 0.0 && den > 0.0).then(|| num / den)
}

/// Joint optimisation of poses, scales and world pointmaps.
///
/// Preconditioned gradient descent with Armijo backtracking on the objective
/// with `χ` eliminated in closed form. The anchor (lowest id) keeps the
/// identity pose and `Σ log σ_e = 0` is restored after every step.
pub fn align(bundles: &[ViewBundle], opts: &AlignOptions) -> Result<(AlignmentState, AlignReport), AlignError> {
    let graph = build_view_graph(bundles)?;
    let init = initial_state(bundles, &graph)?;
    optimize(bundles, init, opts)
}

/// Runs the optimiser from an explicit starting state.
pub fn optimize(
    bundles: &[ViewBundle],
    mut state: AlignmentState,
    opts: &AlignOptions,
) -> Result<(AlignmentState, AlignReport), AlignError> {
    let problem = Problem::new(bundles)?;
    problem.check(&state)?;
    state.poses[0] = PoseSE3::identity();
    let m = problem.views.len();
    let norm = problem.total_weight.max(f64::MIN_POSITIVE);
    let eval = |poses: &[PoseSE3], scales: &[f64]| {
        let (chi, _) = problem.closed_form_chi(poses, scales);
        (problem.objective(poses, scales, &chi), chi)
    };
    let (mut f, mut chi) = eval(&state.poses, &state.scales);
    let mut history = vec![IterationRecord {
        objective: f,
        scale_product: state.scales.iter().product(),
    }];
    let mut converged = false;
    let mut gnorm = f64::INFINITY;
    let mut iterations = 0;
    let mut step = opts.lr;
    for _ in 0..opts.max_iters {
        let mut g = problem.gradient(&state.poses, &state.scales, &chi, false);
        g.rotation[0] = Vec3::zeros();
        g.translation[0] = Vec3::zeros();
        let mean = g.log_scale.iter().sum::<f64>() / g.log_scale.len() as f64;
        g.log_scale.iter_mut().for_each(|x| *x -= mean);
        gnorm = (g.rotation.iter().chain(&g.translation).map(|v| v.norm_squared()).sum::<f64>()
            + g.log_scale.iter().map(|x| x * x).sum::<f64>())
        .sqrt()
            / norm;
        if gnorm < opts.tol {
            converged = true;
            break;
        }
        let (drot, dtrans, dscale) = problem.diagonal(&state.poses, &state.scales);
        let dir_rot: Vec<Vec3> = (0..m)
            .map(|k| -g.rotation[k].component_div(&drot[k].map(|d| d.max(1e-300))))
            .collect();
        let dir_trans: Vec<Vec3> = (0..m).map(|k| -g.translation[k] / dtrans[k].max(1e-300)).collect();
        // A single scalar for all scales keeps the direction zero-mean.
        let ds = dscale.iter().sum::<f64>() / dscale.len() as f64;
        let dir_scale: Vec<f64> = g.log_scale.iter().map(|x| -x / ds.max(1e-300)).collect();
        let slope: f64 = (0..m)
            .map(|k| g.rotation[k].dot(&dir_rot[k]) + g.translation[k].dot(&dir_trans[k]))
            .sum::<f64>()
            + g.log_scale.iter().zip(&dir_scale).map(|(a, b)| a * b).sum::<f64>();
        if !(slope < 0.0) {
            converged = true;
            break;
        }
        let mut accepted = None;
        let mut t = step;
        for _ in 0..40 {
            let poses: Vec<PoseSE3> = (0..m)
                .map(|k| {
                    if k == 0 {
                        return PoseSE3::identity();
                    }
                    let p = &state.poses[k];
                    PoseSE3 {
                        rotation: so3_exp(&(dir_rot[k] * t)) * p.rotation,
                        translation: p.translation + dir_trans[k] * t,
                    }
                })
                .collect();
            let mut logs: Vec<f64> = state.scales.iter().zip(&dir_scale).map(|(s, d)| s.ln() + d * t).collect();
            let mean = logs.iter().sum::<f64>() / logs.len() as f64;
            logs.iter_mut().for_each(|x| *x -= mean);
            let scales: Vec<f64> = logs.iter().map(|x| x.exp()).collect();
            let (fn_, chi_n) = eval(&poses, &scales);
            if fn_ <= f + 1e-4 * t * slope {
                accepted = Some((poses, scales, fn_, chi_n));
                break;
            }
            t *= 0.5;
        }
        let Some((poses, scales, fn_, chi_n)) = accepted else {
            converged = gnorm < opts.tol.sqrt();
            break;
        };
        iterations += 1;
        let decrease = f - fn_;
        state.poses = poses;
        state.scales = scales;
        f = fn_;
        chi = chi_n;
        history.push(IterationRecord {
            objective: f,
            scale_product: state.scales.iter().product(),
        });
        step = (t * 2.0).min(opts.lr);
        if decrease <= 1e-15 * f.max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }
    let (chi, den) = problem.closed_form_chi(&state.poses, &state.scales);
    state.global_pointmaps = chi_to_pointmaps(&problem, chi, &den);
    Ok((
        state,
        AlignReport {
            iterations,
            objective: f,
            gradient_norm: gnorm,
            converged,
            history,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{rotation_angle, ScalarMap};
    use crate::scene::{all_ordered_pairs, emit_view_bundles, generate_room, Scene, SceneSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene(walls: usize, cams: usize, seed: u64) -> Scene {
        generate_room(&SceneSpec {
            wall_count: walls,
            camera_count: cams,
            seed,
            ..SceneSpec::default()
        })
        .unwrap()
    }

    fn fake_bundle(i: usize, j: usize, conf: f64) -> ViewBundle {
        let pm = Pointmap::new(2, 1, vec![Vec3::new(0.0, 0.0, 1.0); 2], vec![true; 2]).unwrap();
        let c = ScalarMap::filled(2, 1, conf);
        ViewBundle {
            image_id: i,
            partner_id: j,
            pointmap_self: pm.clone(),
            pointmap_other: pm,
            confidence_self: c.clone(),
            confidence_other: c,
            plane_masks: crate::geom::LabelMap::filled(2, 1, 0),
        }
    }

    fn mst_pairs(g: &ViewGraph) -> Vec<(usize, usize)> {
        g.mst_edges.iter().map(|&k| (g.edges[k].a, g.edges[k].b)).collect()
    }

    #[test]
    fn two_views_single_edge() {
        let g = build_view_graph(&[fake_bundle(0, 1, 0.7)]).unwrap();
        assert_eq!(mst_pairs(&g), vec![(0, 1)]);
    }

    #[test]
    fn three_views_keep_strongest_edges() {
        let g = build_view_graph(&[fake_bundle(0, 1, 0.9), fake_bundle(1, 2, 0.8), fake_bundle(0, 2, 0.2)]).unwrap();
        assert_eq!(mst_pairs(&g), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn disconnected_graph_reports_components() {
        let g = build_view_graph(&[fake_bundle(0, 1, 0.9), fake_bundle(2, 3, 0.8)]).unwrap();
        assert_eq!(g.components, vec![vec![0, 1], vec![2, 3]]);
        assert!(matches!(initial_state(&[fake_bundle(0, 1, 0.9), fake_bundle(2, 3, 0.8)], &g), Err(AlignError::Disconnected(_))));
    }

    #[test]
    fn five_view_tree_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let bundles: Vec<ViewBundle> = (0..5)
                .flat_map(|a| (a + 1..5).map(move |b| (a, b)))
                .map(|(a, b)| fake_bundle(a, b, rng.random_range(0.1..1.0)))
                .collect();
            let g = build_view_graph(&bundles).unwrap();
            let total: f64 = g.mst_edges.iter().map(|&k| g.edges[k].weight).sum();
            // All 4-edge subsets of the 10 edges that connect the 5 views.
            let mut best = f64::NEG_INFINITY;
            let mut trees = 0;
            for mask in 0u32..1 << 10 {
                if mask.count_ones() != 4 {
                    continue;
                }
                let mut uf = UnionFind::new(5);
                let mut ok = true;
                let mut w = 0.0;
                for k in 0..10 {
                    if mask >> k & 1 == 1 {
                        ok &= uf.union(g.edges[k].a, g.edges[k].b);
                        w += g.edges[k].weight;
                    }
                }
                if ok {
                    trees += 1;
                    best = best.max(w);
                }
            }
            assert_eq!(trees, 125);
            assert!((total - best).abs() < 1e-12);
        }
    }

    fn gt_state(scene: &Scene, bundles: &[ViewBundle]) -> AlignmentState {
        let anchor = scene.cameras[0].pose.inverse();
        let views: Vec<usize> = (0..scene.cameras.len()).collect();
        let poses: Vec<PoseSE3> = views.iter().map(|&v| anchor.compose(&scene.cameras[v].pose)).collect();
        let scales = vec![1.0; bundles.len()];
        let problem = Problem::new(bundles).unwrap();
        let (chi, den) = problem.closed_form_chi(&poses, &scales);
        AlignmentState { views, poses, scales, global_pointmaps: chi_to_pointmaps(&problem, chi, &den) }
    }

    #[test]
    fn ground_truth_state_has_zero_objective() {
        let s = scene(4, 3, 2);
        let bundles = emit_view_bundles(&s, &all_ordered_pairs(3), 0.0, 1).unwrap();
        let state = gt_state(&s, &bundles);
        assert!(align_objective(&state, &bundles).unwrap() < 1e-18 * 1e6);
    }

    #[test]
    fn translation_perturbation_closed_form() {
        let s = scene(4, 2, 3);
        let bundles = emit_view_bundles(&s, &all_ordered_pairs(2), 0.0, 1).unwrap();
        let mut state = gt_state(&s, &bundles);
        let delta = Vec3::new(0.03, -0.02, 0.05);
        state.poses[1].translation += delta;
        // Only the bundle referenced on view 1 moves; both its maps shift by δ.
        let b = &bundles[1];
        assert_eq!(b.image_id, 1);
        let weight: f64 = b.pointmap_self.iter_valid().map(|(i, _)| b.confidence_self.data[i]).sum::<f64>()
            + b.pointmap_other.iter_valid().map(|(i, _)| b.confidence_other.data[i]).sum::<f64>();
        let f = align_objective(&state, &bundles).unwrap();
        let expect = weight * delta.norm_squared();
        assert!((f - expect).abs() < 1e-9 * expect, "{f} {expect}");
    }

    fn random_state(bundles: &[ViewBundle], rng: &mut ChaCha8Rng) -> AlignmentState {
        let problem = Problem::new(bundles).unwrap();
        let m = problem.views.len();
        let poses = (0..m)
            .map(|_| {
                let w = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
                let t = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                PoseSE3::from_axis_angle(&w, t)
            })
            .collect();
        let scales = (0..bundles.len()).map(|_| rng.random_range(0.5..2.0)).collect();
        let global_pointmaps = problem
            .shapes
            .iter()
            .map(|&(w, h)| {
                let pts = (0..w * h)
                    .map(|_| Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
                    .collect();
                Pointmap::new(w, h, pts, vec![true; w * h]).unwrap()
            })
            .collect();
        AlignmentState { views: problem.views.clone(), poses, scales, global_pointmaps }
    }

    /// Direct per-pixel evaluation, independent of the flattened problem.
    fn objective_oracle(state: &AlignmentState, bundles: &[ViewBundle]) -> f64 {
        let mut total = 0.0;
        for (e, b) in bundles.iter().enumerate() {
            let n = state.views.iter().position(|&v| v == b.image_id).unwrap();
            let pose = state.poses[n];
            for (v, pm, c) in [
                (b.image_id, &b.pointmap_self, &b.confidence_self),
                (b.partner_id, &b.pointmap_other, &b.confidence_other),
            ] {
                let k = state.views.iter().position(|&x| x == v).unwrap();
                for row in 0..pm.height {
                    for col in 0..pm.width {
                        if let Some(x) = pm.get(row, col) {
                            let i = row * pm.width + col;
                            let pred = (pose.rotation * x + pose.translation) * state.scales[e];
                            total += c.data[i] * (state.global_pointmaps[k].points[i] - pred).norm_squared();
                        }
                    }
                }
            }
        }
        total
    }

    #[test]
    fn objective_matches_per_pixel_oracle() {
        let s = scene(6, 3, 4);
        let bundles = emit_view_bundles(&s, &all_ordered_pairs(3), 0.05, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let state = random_state(&bundles, &mut rng);
            let a = align_objective(&state, &bundles).unwrap();
            let b = objective_oracle(&state, &bundles);
            assert!((a - b).abs() <= 1e-10 * b.abs());
        }
    }

    #[test]
    fn non_positive_scale_is_rejected() {
        let s = scene(4, 2, 3);
        let bundles = emit_view_bundles(&s, &all_ordered_pairs(2), 0.0, 1).unwrap();
        let mut state = gt_state(&s, &bundles);
        state.scales[1] = 0.0;
        assert!(matches!(align_objective(&state, &bundles), Err(AlignError::NonPositiveScale { index: 1, .. })));
    }

    /// Largest relative error between analytic and central-difference
    /// gradients over all pose and scale parameters and sampled `χ` entries.
    pub(crate) fn gradient_check(state: &AlignmentState, bundles: &[ViewBundle], rng: &mut ChaCha8Rng) -> f64 {
        let g = align_gradient(state, bundles).unwrap();
        let f = |s: &AlignmentState| align_objective(s, bundles).unwrap();
        let h = 1e-5;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for k in 0..state.views.len() {
            for a in 0..3 {
                let mut e = Vec3::zeros();
                e[a] = h;
                let (mut p, mut m) = (state.clone(), state.clone());
                p.poses[k].rotation = so3_exp(&e) * p.poses[k].rotation;
                m.poses[k].rotation = so3_exp(&-e) * m.poses[k].rotation;
                numeric.push((f(&p) - f(&m)) / (2.0 * h));
                analytic.push(g.rotation[k][a]);
                let (mut p, mut m) = (state.clone(), state.clone());
                p.poses[k].translation[a] += h;
                m.poses[k].translation[a] -= h;
                numeric.push((f(&p) - f(&m)) / (2.0 * h));
                analytic.push(g.translation[k][a]);
            }
        }
        for e in 0..state.scales.len() {
            let (mut p, mut m) = (state.clone(), state.clone());
            p.scales[e] *= h.exp();
            m.scales[e] *= (-h).exp();
            numeric.push((f(&p) - f(&m)) / (2.0 * h));
            analytic.push(g.log_scale[e]);
        }
        for _ in 0..12 {
            let k = rng.random_range(0..state.views.len());
            let i = rng.random_range(0..state.global_pointmaps[k].len());
            let a = rng.random_range(0..3);
            let (mut p, mut m) = (state.clone(), state.clone());
            p.global_pointmaps[k].points[i][a] += h;
            m.global_pointmaps[k].points[i][a] -= h;
            numeric.push((f(&p) - f(&m)) / (2.0 * h));
            analytic.push(g.chi[k][i][a]);
        }
        let scale = numeric.iter().map(|x: &f64| x.abs()).fold(0.0, f64::max);
        analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs() / n.abs().max(1e-3 * scale))
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradient_matches_central_differences() {
        let s = scene(4, 2, 6);
        let bundles = emit_view_bundles(&s, &all_ordered_pairs(2), 0.02, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..4 {
            let state = random_state(&bundles, &mut rng);
            let err = gradient_check(&state, &bundles, &mut rng);
            assert!(err < 1e-5, "relative error {err}");
        }
    }

    fn relative(a: &PoseSE3, b: &PoseSE3) -> PoseSE3 {
        a.inverse().compose(b)
    }

    fn pose_error(scene: &Scene, state: &AlignmentState, bundles: &[ViewBundle]) -> (f64, f64) {
        let canon = canonical_bundles(bundles);
        let n = scene.cameras.len();
        let (mut rot, mut trans) = (0.0f64, 0.0f64);
        for i in 0..n {
            for j in 0..n {
                let gt = relative(&scene.cameras[i].pose, &scene.cameras[j].pose);
                let pi = state.camera_pose(i, canon[&i]).unwrap();
                let pj = state.camera_pose(j, canon[&j]).unwrap();
                let pr = relative(&pi, &pj);
                rot = rot.max(rotation_angle(&(gt.rotation.transpose() * pr.rotation)));
                trans = trans.max((gt.translation - pr.translation).norm());
            }
        }
        (rot, trans)
    }

    #[test]
    fn single_pair_recovers_relative_pose() {
        let s = scene(4, 2, 12);
        let bundles = emit_view_bundles(&s, &all_ordered_pairs(2), 0.0, 0).unwrap();
        let (state, report) = align(&bundles, &AlignOptions::default()).unwrap();
        let (r, t) = pose_error(&s, &state, &bundles);
        assert!(r < 1e-6 && t < 1e-6, "{r} {t} {report:?}");
        assert!((state.scales.iter().product::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn duplicated_view_is_identity() {
        let mut s = scene(4, 1, 13);
        s.cameras.push(s.cameras[0].clone());
        let bundles = emit_view_bundles(&s, &all_ordered_pairs(2), 0.0, 0).unwrap();
        let (state, _) = align(&bundles, &AlignOptions::default()).unwrap();
        let canon = canonical_bundles(&bundles);
        let p = state.camera_pose(1, canon[&1]).unwrap();
        assert!(rotation_angle(&p.rotation) < 1e-9 && p.translation.norm() < 1e-9);
    }

    #[test]
    fn ring_of_four_views_recovers_poses() {
        let s = scene(6, 4, 14);
        let bundles = emit_view_bundles(&s, &[(0, 1), (1, 2), (2, 3), (3, 0)], 0.0, 0).unwrap();
        let (state, _) = align(&bundles, &AlignOptions::default()).unwrap();
        let (r, t) = pose_error(&s, &state, &bundles);
        assert!(r < 1e-5 && t < 1e-5, "{r} {t}");
    }

    #[test]
    fn noisy_run_is_monotone_and_keeps_scale_product() {
        let s = scene(6, 3, 15);
        let bundles = emit_view_bundles(&s, &all_ordered_pairs(3), 0.06, 4).unwrap();
        let graph = build_view_graph(&bundles).unwrap();
        let mut init = initial_state(&bundles, &graph).unwrap();
        // Start away from the registration optimum so the optimiser has work.
        init.poses[1].translation += Vec3::new(0.1, -0.05, 0.08);
        init.poses[2].rotation = so3_exp(&Vec3::new(0.02, 0.03, -0.01)) * init.poses[2].rotation;
        let (state, report) = optimize(&bundles, init, &AlignOptions { max_iters: 60, ..AlignOptions::default() }).unwrap();
        assert!(report.iterations > 0);
        for w in report.history.windows(2) {
            assert!(w[1].objective <= w[0].objective);
        }
        for h in &report.history[1..] {
            assert!((h.scale_product - 1.0).abs() < 1e-9);
        }
        let (r, t) = pose_error(&s, &state, &bundles);
        assert!(r.to_degrees() < 1.0 && t < 0.05, "{r} {t}");
    }

    #[test]
    fn rigid_change_of_world_leaves_relative_poses() {
        let s = scene(4, 3, 16);
        let bundles = emit_view_bundles(&s, &all_ordered_pairs(3), 0.0, 0).unwrap();
        let (state, _) = align(&bundles, &AlignOptions::default()).unwrap();
        let mut moved = s.clone();
        let g = PoseSE3::from_axis_angle(&Vec3::new(0.0, 0.7, 0.3), Vec3::new(1.5, 0.0, -2.0));
        for c in &mut moved.cameras {
            c.pose = g.compose(&c.pose);
        }
        let (r0, t0) = pose_error(&s, &state, &bundles);
        let (r1, t1) = pose_error(&moved, &state, &bundles);
        assert!(r0 < 1e-9 && (r0 - r1).abs() < 1e-9, "{r0} {r1}");
        assert!(t0 < 1e-9 && (t0 - t1).abs() < 1e-9);
        // Recovered world = anchor frame, so mapping it through the anchor's
        // ground-truth pose reproduces every camera of either world.
        let canon = canonical_bundles(&bundles);
        for world in [&s, &moved] {
            let anchor = world.cameras[0].pose;
            for (k, cam) in world.cameras.iter().enumerate() {
                let p = anchor.compose(&state.camera_pose(k, canon[&k]).unwrap());
                assert!(rotation_angle(&(p.rotation.transpose() * cam.pose.rotation)) < 1e-9);
                assert!((p.translation - cam.pose.translation).norm() < 1e-9);
            }
        }
    }
}
