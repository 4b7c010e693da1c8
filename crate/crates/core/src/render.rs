//! Birdview SVG and OBJ wireframe export.

use crate::geom::{Vec2, Vec3};
use crate::merge::{Layout, WallSegment2D};
use std::fmt::Write;

const PX_PER_M: f64 = 100.0;
const PAD_M: f64 = 0.5;

/// Stable colour for a plane id.
pub fn plane_color(id: usize) -> String {
    let h = (id as f64 * 137.508).rem_euclid(360.0) / 60.0;
    let (s, l) = (0.65, 0.45);
    let c = (1.0 - (2.0 * l - 1.0f64).abs()) * s;
    let x = c * (1.0 - (h.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = l - c / 2.0;
    let byte = |v: f64| ((v + m) * 255.0).round() as u8;
    format!("#{:02x}{:02x}{:02x}", byte(r), byte(g), byte(b))
}

struct Canvas {
    min: Vec2,
    width: f64,
    height: f64,
    body: String,
}

impl Canvas {
    fn new(points: &[Vec2]) -> Self {
        let (mut lo, mut hi) = (Vec2::repeat(f64::INFINITY), Vec2::repeat(f64::NEG_INFINITY));
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        if points.is_empty() {
            (lo, hi) = (Vec2::zeros(), Vec2::zeros());
        }
        let min = lo - Vec2::repeat(PAD_M);
        let size = hi - lo + Vec2::repeat(2.0 * PAD_M);
        Self { min, width: size.x * PX_PER_M, height: size.y * PX_PER_M, body: String::new() }
    }

    fn xy(&self, p: &Vec2) -> String {
        let q = (p - self.min) * PX_PER_M;
        format!("{:.3},{:.3}", q.x, q.y)
    }

    fn polyline(&mut self, class: &str, plane: Option<usize>, points: &[Vec2]) {
        let pts: Vec<String> = points.iter().map(|p| self.xy(p)).collect();
        let (stroke, id) = match plane {
            Some(k) => (plane_color(k), format!(" data-plane=\"{k}\"")),
            None => ("#888888".to_string(), String::new()),
        };
        writeln!(self.body, "  <polyline class=\"{class}\"{id} stroke=\"{stroke}\" stroke-width=\"4\" fill=\"none\" points=\"{}\"/>", pts.join(" ")).unwrap();
    }

    fn polygon(&mut self, class: &str, points: &[Vec2]) {
        let pts: Vec<String> = points.iter().map(|p| self.xy(p)).collect();
        writeln!(self.body, "  <polygon class=\"{class}\" stroke=\"#000000\" stroke-width=\"1\" fill=\"#f2f2f2\" points=\"{}\"/>", pts.join(" ")).unwrap();
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0}\" height=\"{:.0}\" viewBox=\"0 0 {:.3} {:.3}\">\n{}</svg>\n",
            self.width.ceil(),
            self.height.ceil(),
            self.width,
            self.height,
            self.body
        )
    }
}

/// Top view of a merged layout: the footprint outline and one polyline per
/// wall, coloured by plane id.
pub fn render_birdview(layout: &Layout) -> String {
    let room = layout.room_model();
    let fp: Vec<Vec2> = layout.footprint.iter().map(|p| room.to_2d(p)).collect();
    let walls: Vec<(usize, [Vec2; 2])> = layout.walls.iter().map(|w| (w.plane, [room.to_2d(&w.a), room.to_2d(&w.b)])).collect();
    let all: Vec<Vec2> = fp.iter().copied().chain(walls.iter().flat_map(|w| w.1)).collect();
    let mut c = Canvas::new(&all);
    if !fp.is_empty() {
        c.polygon("floor", &fp);
    }
    for (plane, ends) in &walls {
        c.polyline("wall", Some(*plane), ends);
    }
    c.finish()
}

/// Top view of 2D wall segments; `labels[i]` colours segment `i` (grey when
/// `None`).
pub fn render_segments(segments: &[WallSegment2D], labels: &[Option<usize>]) -> String {
    let all: Vec<Vec2> = segments.iter().flat_map(|s| [s.a, s.b]).collect();
    let mut c = Canvas::new(&all);
    for (s, l) in segments.iter().zip(labels.iter().chain(std::iter::repeat(&None))) {
        c.polyline("segment", *l, &[s.a, s.b]);
    }
    c.finish()
}

/// Edges between junctions: each layout line links the two outermost
/// junctions that lie on it.
pub fn wireframe_edges(layout: &Layout) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for l in &layout.lines {
        let mut on: Vec<(f64, usize)> = layout
            .junctions
            .iter()
            .enumerate()
            .filter(|(_, j)| l.planes.iter().all(|p| j.planes.contains(p)))
            .map(|(k, j)| ((j.junction.position - l.line.point).dot(&l.line.direction), k))
            .collect();
        if on.len() < 2 {
            continue;
        }
        on.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        edges.push((on[0].1, on[on.len() - 1].1));
    }
    edges
}

/// OBJ document with one vertex per junction and one `l` element per edge.
pub fn render_wireframe(layout: &Layout) -> String {
    let mut out = String::from("# layoutfuse wireframe\n");
    for j in &layout.junctions {
        let p: Vec3 = j.junction.position;
        writeln!(out, "v {:.6} {:.6} {:.6}", p.x, p.y, p.z).unwrap();
    }
    for (a, b) in wireframe_edges(layout) {
        writeln!(out, "l {} {}", a + 1, b + 1).unwrap();
    }
    out
}
