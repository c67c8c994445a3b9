//! Keypoint graphs: Delaunay edges plus per-arc pseudo-coordinates.

use std::collections::{BTreeSet, HashSet};

use robust::{incircle, orient2d, Coord};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    pub coords: Vec<[f64; 2]>,
    pub image_id: String,
    /// Ground-truth correspondence indices, when known.
    pub labels: Option<Vec<usize>>,
}

impl KeypointSet {
    pub fn new(coords: Vec<[f64; 2]>, image_id: impl Into<String>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Contract("keypoint set must be non-empty".into()));
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("keypoint coordinates".into()));
        }
        Ok(Self {
            coords,
            image_id: image_id.into(),
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.coords.len() {
            return Err(Error::shape("one label per keypoint required"));
        }
        let unique: HashSet<_> = labels.iter().collect();
        if unique.len() != labels.len() {
            return Err(Error::Contract("labels contain duplicates".into()));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// One direction of a graph edge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DirectedEdge {
    pub src: usize,
    pub dst: usize,
    /// Normalized offset in `[0,1]²`.
    pub pseudo: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointGraph {
    pub num_nodes: usize,
    pub arcs: Vec<DirectedEdge>,
    pub self_loops: bool,
}

impl KeypointGraph {
    /// Delaunay graph over `points` with pseudo-coordinates, optionally with
    /// a `(0.5, 0.5)` self-loop on every node.
    pub fn build(points: &[[f64; 2]], self_loops: bool) -> Self {
        let edges = delaunay(points);
        let mut arcs = pseudo_coords(points, &edges);
        if self_loops {
            arcs.extend((0..points.len()).map(|i| DirectedEdge {
                src: i,
                dst: i,
                pseudo: [0.5, 0.5],
            }));
        }
        Self {
            num_nodes: points.len(),
            arcs,
            self_loops,
        }
    }

    pub fn undirected_edges(&self) -> BTreeSet<(usize, usize)> {
        self.arcs
            .iter()
            .filter(|a| a.src != a.dst)
            .map(|a| (a.src.min(a.dst), a.src.max(a.dst)))
            .collect()
    }

    /// Incoming arc indices per node.
    pub fn incoming(&self) -> Vec<Vec<usize>> {
        let mut inc = vec![Vec::new(); self.num_nodes];
        for (i, a) in self.arcs.iter().enumerate() {
            inc[a.dst].push(i);
        }
        inc
    }

    /// Same graph with nodes relabelled: node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            num_nodes: self.num_nodes,
            arcs: self
                .arcs
                .iter()
                .map(|a| DirectedEdge {
                    src: perm[a.src],
                    dst: perm[a.dst],
                    pseudo: a.pseudo,
                })
                .collect(),
            self_loops: self.self_loops,
        }
    }
}

fn complete_graph(m: usize) -> Vec<(usize, usize)> {
    let mut e = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            e.push((i, j));
        }
    }
    e
}

fn coord(p: [f64; 2]) -> Coord<f64> {
    Coord { x: p[0], y: p[1] }
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    orient2d(coord(a), coord(b), coord(c))
}

const GHOST: usize = usize::MAX;

/// Undirected Delaunay edges `(u, v)` with `u < v`, sorted.
///
/// Points are inserted in index order into a triangulation closed by ghost
/// triangles, so no bounding super-triangle distorts the hull. Predicates
/// are exact; a point lying exactly on a circumcircle does not invalidate
/// the triangle, which resolves co-circular ties by insertion order.
/// Fewer than three points, duplicated points and fully collinear inputs
/// yield the complete graph.
pub fn delaunay(points: &[[f64; 2]]) -> Vec<(usize, usize)> {
    let m = points.len();
    if m < 3 {
        return complete_graph(m);
    }
    let mut seen = HashSet::new();
    if !points.iter().all(|p| seen.insert((p[0].to_bits(), p[1].to_bits()))) {
        return complete_graph(m);
    }
    let Some(third) = (2..m).find(|&k| orient(points[0], points[1], points[k]) != 0.0) else {
        return complete_graph(m);
    };

    let mut tris: Vec<[usize; 3]> = Vec::new();
    let (a, b, c) = if orient(points[0], points[1], points[third]) > 0.0 {
        (0, 1, third)
    } else {
        (1, 0, third)
    };
    tris.push([a, b, c]);
    for (x, y) in [(a, b), (b, c), (c, a)] {
        tris.push([y, x, GHOST]);
    }

    for p in (2..m).filter(|&k| k != third) {
        let pt = points[p];
        let in_conflict = |t: &[usize; 3]| -> bool {
            if t[2] == GHOST {
                let (u, v) = (points[t[0]], points[t[1]]);
                let o = orient(u, v, pt);
                o > 0.0 || (o == 0.0 && strictly_between(u, v, pt))
            } else {
                incircle(coord(points[t[0]]), coord(points[t[1]]), coord(points[t[2]]), coord(pt)) > 0.0
            }
        };
        let (cavity, keep): (Vec<_>, Vec<_>) = tris.into_iter().partition(in_conflict);
        tris = keep;
        let directed: HashSet<(usize, usize)> = cavity
            .iter()
            .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
            .collect();
        for t in &cavity {
            for (x, y) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                if directed.contains(&(y, x)) {
                    continue;
                }
                tris.push(canonical([x, y, p]));
            }
        }
    }

    let mut edges = BTreeSet::new();
    for t in tris.iter().filter(|t| t[2] != GHOST) {
        for (x, y) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            edges.insert((x.min(y), x.max(y)));
        }
    }
    edges.into_iter().collect()
}

/// Rotates a triangle so a ghost vertex, if any, sits last.
fn canonical(t: [usize; 3]) -> [usize; 3] {
    match t.iter().position(|&v| v == GHOST) {
        Some(0) => [t[1], t[2], t[0]],
        Some(1) => [t[2], t[0], t[1]],
        _ => t,
    }
}

fn strictly_between(u: [f64; 2], v: [f64; 2], p: [f64; 2]) -> bool {
    let d = [v[0] - u[0], v[1] - u[1]];
    let t = (p[0] - u[0]) * d[0] + (p[1] - u[1]) * d[1];
    t > 0.0 && t < d[0] * d[0] + d[1] * d[1]
}

/// Both directions of every edge with min-max normalized offsets.
///
/// Arc `(u→v)` carries `d = coords[v] − coords[u]`; each component is
/// rescaled by the per-graph minimum and maximum over all arcs. A
/// component that is constant across arcs maps to 0.5.
pub fn pseudo_coords(points: &[[f64; 2]], edges: &[(usize, usize)]) -> Vec<DirectedEdge> {
    let mut arcs: Vec<(usize, usize, [f64; 2])> = Vec::with_capacity(edges.len() * 2);
    for &(u, v) in edges {
        assert!(u < points.len() && v < points.len(), "edge ({u}, {v}) out of range");
        for (s, t) in [(u, v), (v, u)] {
            let d = [points[t][0] - points[s][0], points[t][1] - points[s][1]];
            arcs.push((s, t, d));
        }
    }
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for (_, _, d) in &arcs {
        for c in 0..2 {
            lo[c] = lo[c].min(d[c]);
            hi[c] = hi[c].max(d[c]);
        }
    }
    arcs.into_iter()
        .map(|(src, dst, d)| {
            let mut pseudo = [0.5; 2];
            for c in 0..2 {
                let range = hi[c] - lo[c];
                if range > 1e-12 * hi[c].abs().max(lo[c].abs()).max(1.0) {
                    pseudo[c] = ((d[c] - lo[c]) / range).clamp(0.0, 1.0);
                }
            }
            DirectedEdge { src, dst, pseudo }
        })
        .collect()
}
