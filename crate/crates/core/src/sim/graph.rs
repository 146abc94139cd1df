//! Procedural road graphs in window pixel space and their binary rasters.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{RasterImage, Space};
use crate::rng::{substream, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoadStyle {
    Grid,
    Radial,
    Organic,
}

impl RoadStyle {
    pub const ALL: [RoadStyle; 3] = [RoadStyle::Grid, RoadStyle::Radial, RoadStyle::Organic];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub two_way: bool,
    /// Pixels per second.
    pub speed: f64,
}

/// Vertices are integer pixel positions `[col, row]` inside a `size × size`
/// window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadGraph {
    pub size: usize,
    pub vertices: Vec<[i32; 2]>,
    pub edges: Vec<Edge>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphParams {
    /// Window side in pixels.
    pub size: usize,
    /// Lattice spacing of the grid style.
    pub grid_pitch: usize,
}

impl GraphParams {
    pub fn for_size(size: usize) -> Self {
        Self { size, grid_pitch: (size / 4).max(2) }
    }
}

/// Lattice points of the grid style: `pitch/2 + k·pitch` on both axes.
pub fn grid_lattice(size: usize, pitch: usize) -> Vec<[i32; 2]> {
    let coords: Vec<i32> = (0..).map(|k| pitch / 2 + k * pitch).take_while(|&v| v < size).map(|v| v as i32).collect();
    coords.iter().flat_map(|&row| coords.iter().map(move |&col| [col, row])).collect()
}

/// Pixels on the 8-connected Bresenham line from `p` to `q`, both ends included.
pub fn line_pixels(p: [i32; 2], q: [i32; 2]) -> Vec<[i32; 2]> {
    let (mut x, mut y) = (p[0], p[1]);
    let dx = (q[0] - x).abs();
    let dy = -(q[1] - y).abs();
    let sx = if x < q[0] { 1 } else { -1 };
    let sy = if y < q[1] { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx.max(-dy) + 1) as usize);
    loop {
        out.push([x, y]);
        if x == q[0] && y == q[1] {
            return out;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Compass bearing in degrees of travel from `p` to `q` (rows grow southward).
pub fn bearing(p: [i32; 2], q: [i32; 2]) -> f64 {
    let dx = f64::from(q[0] - p[0]);
    let dy = f64::from(q[1] - p[1]);
    dx.atan2(-dy).to_degrees().rem_euclid(360.0)
}

impl RoadGraph {
    pub fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for e in &self.edges {
            adj[e.a].push(e.b);
            adj[e.b].push(e.a);
        }
        adj
    }

    pub fn is_connected(&self) -> bool {
        if self.vertices.is_empty() {
            return false;
        }
        let adj = self.neighbours();
        let mut seen = vec![false; self.vertices.len()];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(v) = queue.pop_front() {
            for &u in &adj[v] {
                if !seen[u] {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Checks the structural invariants: indices in range, no self-loops,
    /// no isolated vertices, one connected component, vertices in window.
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        let side = self.size as i32;
        if self.vertices.iter().any(|v| v[0] < 0 || v[1] < 0 || v[0] >= side || v[1] >= side) {
            return Err(Error::Contract("vertex outside the window".into()));
        }
        for e in &self.edges {
            if e.a >= n || e.b >= n {
                return Err(Error::Contract(format!("edge ({}, {}) references a missing vertex", e.a, e.b)));
            }
            if e.a == e.b {
                return Err(Error::Contract(format!("self-loop at vertex {}", e.a)));
            }
        }
        let adj = self.neighbours();
        if let Some(v) = adj.iter().position(Vec::is_empty) {
            return Err(Error::Contract(format!("vertex {v} has no edges")));
        }
        if !self.is_connected() {
            return Err(Error::Contract("road graph is not connected".into()));
        }
        Ok(())
    }

    pub fn edge_pixels(&self, e: &Edge) -> Vec<[i32; 2]> {
        line_pixels(self.vertices[e.a], self.vertices[e.b])
    }

    /// Maps every road pixel to the edges whose lines cover it.
    pub fn pixel_edges(&self) -> BTreeMap<[i32; 2], Vec<usize>> {
        let mut map: BTreeMap<[i32; 2], Vec<usize>> = BTreeMap::new();
        for (k, e) in self.edges.iter().enumerate() {
            for px in self.edge_pixels(e) {
                let list = map.entry(px).or_default();
                if list.last() != Some(&k) {
                    list.push(k);
                }
            }
        }
        map
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.iter().any(|e| (e.a == a && e.b == b) || (e.a == b && e.b == a))
    }
}

pub fn rasterize_road_graph(g: &RoadGraph) -> RasterImage {
    let mut img = RasterImage::zeros(g.size, g.size, 1, Space::Count);
    let side = g.size as i32;
    let mut mark = |p: [i32; 2]| {
        if (0..side).contains(&p[0]) && (0..side).contains(&p[1]) {
            img.set(p[1] as usize, p[0] as usize, 0, 1.0);
        }
    };
    for v in &g.vertices {
        mark(*v);
    }
    for e in &g.edges {
        for p in g.edge_pixels(e) {
            mark(p);
        }
    }
    img
}

/// Accumulates vertices and edges, merging coincident points and dropping
/// self-loops and duplicate edges.
struct Builder {
    size: usize,
    index: BTreeMap<[i32; 2], usize>,
    vertices: Vec<[i32; 2]>,
    edges: Vec<(usize, usize)>,
    seen: BTreeSet<(usize, usize)>,
}

impl Builder {
    fn new(size: usize) -> Self {
        Self { size, index: BTreeMap::new(), vertices: Vec::new(), edges: Vec::new(), seen: BTreeSet::new() }
    }

    fn vertex(&mut self, x: f64, y: f64) -> usize {
        let hi = self.size as f64 - 1.0;
        let p = [x.round().clamp(0.0, hi) as i32, y.round().clamp(0.0, hi) as i32];
        *self.index.entry(p).or_insert_with(|| {
            self.vertices.push(p);
            self.vertices.len() - 1
        })
    }

    fn edge(&mut self, a: usize, b: usize) {
        if a != b && self.seen.insert((a.min(b), a.max(b))) {
            self.edges.push((a, b));
        }
    }

    fn finish(self, rng: &mut Rng) -> RoadGraph {
        let mut used = vec![false; self.vertices.len()];
        for &(a, b) in &self.edges {
            used[a] = true;
            used[b] = true;
        }
        let mut remap = vec![usize::MAX; self.vertices.len()];
        let mut vertices = Vec::new();
        for (i, v) in self.vertices.iter().enumerate() {
            if used[i] {
                remap[i] = vertices.len();
                vertices.push(*v);
            }
        }
        let edges = self
            .edges
            .iter()
            .map(|&(a, b)| Edge { a: remap[a], b: remap[b], two_way: rng.random_bool(0.8), speed: rng.random_range(0.5..2.0) })
            .collect();
        RoadGraph { size: self.size, vertices, edges }
    }
}

/// Random spanning tree over `candidates` (Kruskal on a shuffled order); the
/// remaining candidate edges are returned separately.
fn spanning_tree(n: usize, mut candidates: Vec<(usize, usize)>, rng: &mut Rng) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    candidates.shuffle(rng);
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let (mut tree, mut rest) = (Vec::new(), Vec::new());
    for (a, b) in candidates {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            tree.push((a, b));
        } else {
            rest.push((a, b));
        }
    }
    (tree, rest)
}

pub fn synth_road_graph(style: RoadStyle, density: f64, seed: u64, params: &GraphParams) -> Result<RoadGraph> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Domain(format!("density {density} outside (0, 1]")));
    }
    if params.size < 8 {
        return Err(Error::Domain(format!("window size {} below 8", params.size)));
    }
    let mut rng = substream(seed, &format!("road-graph/{style:?}"));
    let size = params.size;
    let s = size as f64;
    let mut b = Builder::new(size);
    match style {
        RoadStyle::Grid => {
            let pitch = params.grid_pitch.max(2);
            let lattice = grid_lattice(size, pitch);
            let side = (lattice.len() as f64).sqrt().round() as usize;
            let ids: Vec<usize> = lattice.iter().map(|p| b.vertex(f64::from(p[0]), f64::from(p[1]))).collect();
            let mut candidates = Vec::new();
            for r in 0..side {
                for c in 0..side {
                    if c + 1 < side {
                        candidates.push((ids[r * side + c], ids[r * side + c + 1]));
                    }
                    if r + 1 < side {
                        candidates.push((ids[r * side + c], ids[(r + 1) * side + c]));
                    }
                }
            }
            let (tree, rest) = spanning_tree(ids.len(), candidates, &mut rng);
            for (u, v) in tree {
                b.edge(u, v);
            }
            for (u, v) in rest {
                if rng.random_bool(density) {
                    b.edge(u, v);
                }
            }
        }
        RoadStyle::Radial => {
            let cx = s / 2.0 + rng.random_range(-0.1..0.1) * s;
            let cy = s / 2.0 + rng.random_range(-0.1..0.1) * s;
            let centre = b.vertex(cx, cy);
            let spokes = rng.random_range(4..=7usize);
            let r1 = s * rng.random_range(0.18..0.28);
            let r2 = s * rng.random_range(0.42..0.55);
            let turn = rng.random_range(0.0..std::f64::consts::TAU);
            let mut inner = Vec::new();
            let mut outer = Vec::new();
            for k in 0..spokes {
                let th = turn + std::f64::consts::TAU * (k as f64 + rng.random_range(-0.15..0.15)) / spokes as f64;
                let i = b.vertex(cx + r1 * th.cos(), cy + r1 * th.sin());
                let o = b.vertex(cx + r2 * th.cos(), cy + r2 * th.sin());
                b.edge(centre, i);
                b.edge(i, o);
                inner.push(i);
                outer.push(o);
            }
            for k in 0..spokes {
                if rng.random_bool(density) {
                    b.edge(inner[k], inner[(k + 1) % spokes]);
                }
                if rng.random_bool(density * 0.5) {
                    b.edge(outer[k], outer[(k + 1) % spokes]);
                }
            }
        }
        RoadStyle::Organic => {
            let n = 5 + size / 8 + rng.random_range(0..4usize);
            let mut ids = Vec::new();
            let mut tries = 0;
            while ids.len() < n && tries < 50 * n {
                tries += 1;
                let before = b.vertices.len();
                let id = b.vertex(rng.random_range(1.0..s - 2.0), rng.random_range(1.0..s - 2.0));
                if b.vertices.len() > before {
                    ids.push(id);
                }
            }
            let dist = |p: [i32; 2], q: [i32; 2]| f64::from(p[0] - q[0]).hypot(f64::from(p[1] - q[1]));
            // Prim's minimum spanning tree
            let mut in_tree = vec![false; ids.len()];
            in_tree[0] = true;
            for _ in 1..ids.len() {
                let mut best = (f64::INFINITY, 0, 0);
                for (i, &u) in ids.iter().enumerate().filter(|(i, _)| in_tree[*i]) {
                    for (j, &v) in ids.iter().enumerate().filter(|(j, _)| !in_tree[*j]) {
                        let d = dist(b.vertices[u], b.vertices[v]);
                        if d < best.0 {
                            best = (d, i, j);
                        }
                    }
                }
                in_tree[best.2] = true;
                b.edge(ids[best.1], ids[best.2]);
            }
            for i in 0..ids.len() {
                for j in i + 1..ids.len() {
                    if dist(b.vertices[ids[i]], b.vertices[ids[j]]) < s / 2.5 && rng.random_bool(density * 0.5) {
                        b.edge(ids[i], ids[j]);
                    }
                }
            }
        }
    }
    let g = b.finish(&mut rng);
    g.validate()?;
    Ok(g)
}
