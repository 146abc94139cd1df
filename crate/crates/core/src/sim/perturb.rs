//! Road-network edits with change masks.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::raster::{RasterImage, Space};
use crate::rng::{substream, Rng};
use crate::sim::graph::{rasterize_road_graph, Edge, RoadGraph};

/// One edit. A `None` target is chosen at random from the eligible ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum PerturbOp {
    RemoveEdge { edge: Option<usize> },
    AddEdge { from: Option<usize>, to: Option<usize> },
    JunctionToRoundabout { vertex: Option<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Perturbed {
    pub graph: RoadGraph,
    /// Pixelwise XOR of the original and edited road rasters.
    pub mask: RasterImage,
    pub applied: usize,
    /// One human-readable reason per skipped op.
    pub skipped: Vec<String>,
}

impl Perturbed {
    /// True when ops were requested but none took effect.
    pub fn is_no_change(&self) -> bool {
        self.applied == 0 && !self.skipped.is_empty()
    }
}

pub fn change_mask(before: &RasterImage, after: &RasterImage) -> RasterImage {
    let values = before.values.iter().zip(&after.values).map(|(a, b)| if (*a != 0.0) != (*b != 0.0) { 1.0 } else { 0.0 }).collect();
    RasterImage { values, space: Space::Count, ..before.clone() }
}

fn remove_edge(g: &RoadGraph, k: usize) -> Result<RoadGraph, String> {
    if k >= g.edges.len() {
        return Err(format!("edge {k} does not exist"));
    }
    let mut h = g.clone();
    h.edges.remove(k);
    compact(&mut h);
    // a dead end may close (its end vertex goes with it); anything else must stay connected
    if h.edges.is_empty() || h.validate().is_err() {
        return Err(format!("removing edge {k} disconnects the network"));
    }
    Ok(h)
}

fn add_edge(g: &RoadGraph, a: usize, b: usize, rng: &mut Rng) -> Result<RoadGraph, String> {
    let n = g.vertices.len();
    if a >= n || b >= n {
        return Err(format!("vertex pair ({a}, {b}) does not exist"));
    }
    if a == b || g.has_edge(a, b) {
        return Err(format!("edge ({a}, {b}) is a self-loop or already present"));
    }
    let mut h = g.clone();
    h.edges.push(Edge { a, b, two_way: rng.random_bool(0.8), speed: rng.random_range(0.5..2.0) });
    Ok(h)
}

fn roundabout(g: &RoadGraph, v: usize) -> Result<RoadGraph, String> {
    let adj = g.neighbours();
    if v >= g.vertices.len() || adj[v].len() < 3 {
        return Err(format!("vertex {v} is not a junction of degree ≥ 3"));
    }
    let radius = if g.size >= 64 { 4.0 } else { 2.0 };
    let centre = g.vertices[v];
    let side = g.size as i32;
    let mut h = g.clone();
    // one ring vertex per incident edge, placed along that edge's direction
    let mut incident: Vec<(f64, usize)> = g
        .edges
        .iter()
        .enumerate()
        .filter(|(_, e)| e.a == v || e.b == v)
        .map(|(k, e)| {
            let other = g.vertices[if e.a == v { e.b } else { e.a }];
            (f64::from(other[1] - centre[1]).atan2(f64::from(other[0] - centre[0])), k)
        })
        .collect();
    incident.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut ring = Vec::new();
    for &(theta, k) in &incident {
        let p = [
            centre[0] + (radius * theta.cos()).round() as i32,
            centre[1] + (radius * theta.sin()).round() as i32,
        ];
        if p[0] < 0 || p[1] < 0 || p[0] >= side || p[1] >= side {
            return Err(format!("roundabout at vertex {v} leaves the window"));
        }
        if g.vertices.contains(&p) || h.vertices[g.vertices.len()..].contains(&p) {
            return Err(format!("roundabout at vertex {v} collides with an existing vertex"));
        }
        let id = h.vertices.len();
        h.vertices.push(p);
        let e = &mut h.edges[k];
        if e.a == v {
            e.a = id;
        } else {
            e.b = id;
        }
        ring.push(id);
    }
    let speed = g.edges.iter().map(|e| e.speed).sum::<f64>() / g.edges.len() as f64;
    for i in 0..ring.len() {
        // one-way ring, counter-clockwise on screen
        h.edges.push(Edge { a: ring[(i + 1) % ring.len()], b: ring[i], two_way: false, speed });
    }
    compact(&mut h);
    h.validate().map_err(|e| format!("roundabout at vertex {v}: {e}"))?;
    Ok(h)
}

/// Drops vertices with no incident edges and renumbers the rest.
fn compact(g: &mut RoadGraph) {
    let mut used = vec![false; g.vertices.len()];
    for e in &g.edges {
        used[e.a] = true;
        used[e.b] = true;
    }
    let mut remap = vec![usize::MAX; g.vertices.len()];
    let mut vertices = Vec::new();
    for (i, v) in g.vertices.iter().enumerate() {
        if used[i] {
            remap[i] = vertices.len();
            vertices.push(*v);
        }
    }
    for e in &mut g.edges {
        e.a = remap[e.a];
        e.b = remap[e.b];
    }
    g.vertices = vertices;
}

fn pick<T: Copy>(items: &[T], rng: &mut Rng) -> Option<T> {
    (!items.is_empty()).then(|| items[rng.random_range(0..items.len())])
}

fn apply(g: &RoadGraph, op: PerturbOp, rng: &mut Rng) -> Result<RoadGraph, String> {
    match op {
        PerturbOp::RemoveEdge { edge: Some(k) } => remove_edge(g, k),
        PerturbOp::RemoveEdge { edge: None } => {
            // only edges whose removal shows up in the raster
            let before = rasterize_road_graph(g);
            let removable: Vec<usize> = (0..g.edges.len())
                .filter(|&k| remove_edge(g, k).is_ok_and(|h| rasterize_road_graph(&h) != before))
                .collect();
            let k = pick(&removable, rng).ok_or("no edge can be removed visibly without disconnecting")?;
            remove_edge(g, k)
        }
        PerturbOp::AddEdge { from, to } => {
            let n = g.vertices.len();
            let reach = g.size as f64 / 2.0;
            let pairs: Vec<(usize, usize)> = (0..n)
                .flat_map(|a| (0..n).map(move |b| (a, b)))
                .filter(|&(a, b)| from.is_none_or(|f| f == a) && to.is_none_or(|t| t == b))
                .filter(|&(a, b)| a < b || from.is_some() || to.is_some())
                .filter(|&(a, b)| {
                    let (p, q) = (g.vertices[a], g.vertices[b]);
                    let close = f64::from(p[0] - q[0]).hypot(f64::from(p[1] - q[1])) <= reach;
                    a != b && !g.has_edge(a, b) && (close || (from.is_some() && to.is_some()))
                })
                .collect();
            match (from, to) {
                (Some(a), Some(b)) => add_edge(g, a, b, rng),
                _ => {
                    let (a, b) = pick(&pairs, rng).ok_or("no vertex pair available for a new edge")?;
                    add_edge(g, a, b, rng)
                }
            }
        }
        PerturbOp::JunctionToRoundabout { vertex: Some(v) } => roundabout(g, v),
        PerturbOp::JunctionToRoundabout { vertex: None } => {
            let adj = g.neighbours();
            let mut junctions: Vec<usize> = (0..g.vertices.len()).filter(|&v| adj[v].len() >= 3).collect();
            while let Some(v) = pick(&junctions, rng) {
                match roundabout(g, v) {
                    Ok(h) => return Ok(h),
                    Err(_) => junctions.retain(|&u| u != v),
                }
            }
            Err("no junction can host a roundabout".into())
        }
    }
}

/// Applies `ops` in order. Ops that fail their preconditions or would
/// disconnect the network are skipped and reported.
pub fn perturb_road_graph(g: &RoadGraph, ops: &[PerturbOp], seed: u64) -> Perturbed {
    let mut rng = substream(seed, "perturb");
    let mut current = g.clone();
    let mut applied = 0;
    let mut skipped = Vec::new();
    for &op in ops {
        match apply(&current, op, &mut rng) {
            Ok(next) => {
                current = next;
                applied += 1;
            }
            Err(reason) => skipped.push(format!("{op:?}: {reason}")),
        }
    }
    let mask = change_mask(&rasterize_road_graph(g), &rasterize_road_graph(&current));
    Perturbed { graph: current, mask, applied, skipped }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::graph::{synth_road_graph, GraphParams, RoadStyle};

    fn xor_bruteforce(a: &RoadGraph, b: &RoadGraph) -> Vec<f64> {
        let (ra, rb) = (rasterize_road_graph(a), rasterize_road_graph(b));
        let mut out = Vec::new();
        for i in 0..ra.h {
            for j in 0..ra.w {
                out.push(f64::from(u8::from((ra.get(i, j, 0) == 1.0) ^ (rb.get(i, j, 0) == 1.0))));
            }
        }
        out
    }

    #[test]
    fn empty_ops_change_nothing() {
        let g = synth_road_graph(RoadStyle::Grid, 0.5, 1, &GraphParams::for_size(32)).unwrap();
        let p = perturb_road_graph(&g, &[], 3);
        assert_eq!(p.graph, g);
        assert_eq!(p.mask.sum(), 0.0);
        assert!(!p.is_no_change());
    }

    #[test]
    fn removed_edge_mask_is_xor() {
        let g = synth_road_graph(RoadStyle::Grid, 1.0, 4, &GraphParams::for_size(64)).unwrap();
        let p = perturb_road_graph(&g, &[PerturbOp::RemoveEdge { edge: None }], 8);
        assert_eq!(p.applied, 1);
        assert_eq!(p.graph.edges.len(), g.edges.len() - 1);
        assert!(p.mask.sum() > 0.0);
        assert_eq!(p.mask.values, xor_bruteforce(&g, &p.graph));
        assert!(p.graph.validate().is_ok());
    }

    #[test]
    fn add_then_remove_is_identity() {
        let g = synth_road_graph(RoadStyle::Organic, 0.3, 6, &GraphParams::for_size(64)).unwrap();
        let (a, b) = (0..g.vertices.len())
            .flat_map(|a| (0..g.vertices.len()).map(move |b| (a, b)))
            .find(|&(a, b)| a != b && !g.has_edge(a, b))
            .unwrap();
        let ops = [PerturbOp::AddEdge { from: Some(a), to: Some(b) }, PerturbOp::RemoveEdge { edge: Some(g.edges.len()) }];
        let p = perturb_road_graph(&g, &ops, 1);
        assert_eq!(p.applied, 2);
        assert_eq!(p.mask.sum(), 0.0);
    }

    #[test]
    fn bridge_removal_is_skipped() {
        let g = RoadGraph {
            size: 16,
            vertices: vec![[1, 1], [8, 1], [8, 8], [14, 8]],
            edges: vec![
                Edge { a: 0, b: 1, two_way: true, speed: 1.0 },
                Edge { a: 1, b: 2, two_way: true, speed: 1.0 },
                Edge { a: 2, b: 3, two_way: true, speed: 1.0 },
            ],
        };
        let p = perturb_road_graph(&g, &[PerturbOp::RemoveEdge { edge: Some(1) }], 1);
        assert_eq!(p.applied, 0);
        assert_eq!(p.skipped.len(), 1);
        assert!(p.is_no_change());
        assert_eq!(p.graph, g);
    }

    #[test]
    fn dead_end_closes_with_its_vertex() {
        let g = RoadGraph {
            size: 16,
            vertices: vec![[1, 1], [8, 1], [8, 8]],
            edges: vec![Edge { a: 0, b: 1, two_way: true, speed: 1.0 }, Edge { a: 1, b: 2, two_way: true, speed: 1.0 }],
        };
        let p = perturb_road_graph(&g, &[PerturbOp::RemoveEdge { edge: Some(0) }], 1);
        assert_eq!(p.applied, 1);
        assert_eq!(p.graph.vertices, vec![[8, 1], [8, 8]]);
        assert!(!p.is_no_change());
        let single = perturb_road_graph(&p.graph, &[PerturbOp::RemoveEdge { edge: None }], 1);
        assert_eq!(single.applied, 0);
    }

    #[test]
    fn roundabout_replaces_junction() {
        let g = synth_road_graph(RoadStyle::Grid, 1.0, 2, &GraphParams { size: 64, grid_pitch: 16 }).unwrap();
        let degree = g.neighbours().iter().map(Vec::len).max().unwrap();
        assert!(degree >= 3);
        let p = perturb_road_graph(&g, &[PerturbOp::JunctionToRoundabout { vertex: None }], 5);
        assert_eq!(p.applied, 1, "{:?}", p.skipped);
        assert!(p.graph.validate().is_ok());
        assert_eq!(p.mask.values, xor_bruteforce(&g, &p.graph));
        assert!(p.mask.sum() > 0.0);
    }

    #[test]
    fn random_ops_keep_graphs_valid() {
        let ops = [
            PerturbOp::RemoveEdge { edge: None },
            PerturbOp::AddEdge { from: None, to: None },
            PerturbOp::JunctionToRoundabout { vertex: None },
        ];
        for seed in 0..30 {
            for style in RoadStyle::ALL {
                let g = synth_road_graph(style, 0.5, seed, &GraphParams::for_size(32)).unwrap();
                let p = perturb_road_graph(&g, &ops, seed);
                assert!(p.graph.validate().is_ok());
                assert_eq!(p.mask.values, xor_bruteforce(&g, &p.graph));
            }
        }
    }
}
