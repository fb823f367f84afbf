//! Mesoscopic graph geometry, incidence algebra, cycle bases and the
//! microscopic Burgers lattice Γ.

use std::collections::VecDeque;
use std::sync::OnceLock;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::{norm3, sub3, Error, Result, Vec3};

/// Default cap on the number of vertices of a box graph.
pub const DEFAULT_VERTEX_CAP: usize = 1 << 20;

/// Graphs up to this many vertices cache their all-pairs distance table.
const DISTANCE_TABLE_MAX: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrientedEdge {
    pub tail: usize,
    pub head: usize,
    pub direction: Vec3,
    pub length: f64,
}

/// A finite oriented graph with vertices embedded in ℝ³.
#[derive(Debug)]
pub struct MesoGraph {
    vertices: Vec<Vec3>,
    edges: Vec<OrientedEdge>,
    /// Per vertex: incident edges with the incidence sign s_ve.
    incidence: Vec<Vec<(usize, i8)>>,
    max_degree: usize,
    distances: OnceLock<Vec<u32>>,
}

impl Clone for MesoGraph {
    fn clone(&self) -> Self {
        MesoGraph {
            vertices: self.vertices.clone(),
            edges: self.edges.clone(),
            incidence: self.incidence.clone(),
            max_degree: self.max_degree,
            distances: OnceLock::new(),
        }
    }
}

/// JSON form of a graph: vertex coordinates and (tail, head) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphJson {
    pub vertices: Vec<Vec3>,
    pub edges: Vec<(usize, usize)>,
}

impl MesoGraph {
    /// Build a graph from vertex positions and oriented (tail, head) pairs.
    pub fn new(vertices: Vec<Vec3>, pairs: &[(usize, usize)]) -> Result<Self> {
        let nv = vertices.len();
        let mut incidence = vec![Vec::new(); nv];
        let mut edges = Vec::with_capacity(pairs.len());
        for (e, &(tail, head)) in pairs.iter().enumerate() {
            if tail >= nv || head >= nv {
                return Err(Error::invalid(format!(
                    "edge {e} references vertex out of range ({tail}, {head}) with {nv} vertices"
                )));
            }
            if tail == head {
                return Err(Error::invalid(format!("edge {e} is a self-loop at vertex {tail}")));
            }
            let d = sub3(&vertices[head], &vertices[tail]);
            let length = norm3(&d);
            if !(length > 0.0) {
                return Err(Error::invalid(format!("edge {e} has zero length")));
            }
            let direction = [d[0] / length, d[1] / length, d[2] / length];
            incidence[tail].push((e, -1));
            incidence[head].push((e, 1));
            edges.push(OrientedEdge { tail, head, direction, length });
        }
        let max_degree = incidence.iter().map(Vec::len).max().unwrap_or(0);
        Ok(MesoGraph { vertices, edges, incidence, max_degree, distances: OnceLock::new() })
    }

    pub fn from_json(json: &GraphJson) -> Result<Self> {
        Self::new(json.vertices.clone(), &json.edges)
    }

    pub fn to_json(&self) -> GraphJson {
        GraphJson { vertices: self.vertices.clone(), edges: self.edges.iter().map(|e| (e.tail, e.head)).collect() }
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn vertex(&self, v: usize) -> Vec3 {
        self.vertices[v]
    }

    pub fn edges(&self) -> &[OrientedEdge] {
        &self.edges
    }

    pub fn edge(&self, e: usize) -> &OrientedEdge {
        &self.edges[e]
    }

    /// Edge vector v₊(e) − v₋(e).
    pub fn edge_vector(&self, e: usize) -> Vec3 {
        let ed = &self.edges[e];
        sub3(&self.vertices[ed.head], &self.vertices[ed.tail])
    }

    /// Incident edges of `v` with their incidence signs.
    pub fn incident(&self, v: usize) -> &[(usize, i8)] {
        &self.incidence[v]
    }

    /// Incidence sign s_ve: +1 if v is the head of e, −1 if the tail, 0 otherwise.
    pub fn incidence_sign(&self, v: usize, e: usize) -> i8 {
        let ed = &self.edges[e];
        if ed.head == v {
            1
        } else if ed.tail == v {
            -1
        } else {
            0
        }
    }

    /// Dense incidence matrix, rows indexed by vertex.
    pub fn incidence_matrix(&self) -> Vec<Vec<i8>> {
        let mut s = vec![vec![0i8; self.edges.len()]; self.vertices.len()];
        for (v, row) in self.incidence.iter().enumerate() {
            for &(e, sign) in row {
                s[v][e] = sign;
            }
        }
        s
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    /// Edges sharing a vertex with `e`, excluding `e`, sorted.
    pub fn edge_neighbors(&self, e: usize) -> Vec<usize> {
        let ed = &self.edges[e];
        let mut out: Vec<usize> = self.incidence[ed.tail]
            .iter()
            .chain(self.incidence[ed.head].iter())
            .map(|&(f, _)| f)
            .filter(|&f| f != e)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Number of connected components of (V, E), isolated vertices included.
    pub fn num_components(&self) -> usize {
        let mut seen = vec![false; self.vertices.len()];
        let mut count = 0;
        for start in 0..self.vertices.len() {
            if seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            let mut queue = VecDeque::from([start]);
            while let Some(v) = queue.pop_front() {
                for &(e, _) in &self.incidence[v] {
                    let w = self.other_end(e, v);
                    if !seen[w] {
                        seen[w] = true;
                        queue.push_back(w);
                    }
                }
            }
        }
        count
    }

    fn other_end(&self, e: usize, v: usize) -> usize {
        let ed = &self.edges[e];
        if ed.tail == v {
            ed.head
        } else {
            ed.tail
        }
    }

    /// BFS distances from `src` in the vertex graph; unreachable vertices get `u32::MAX`.
    pub fn bfs_distances(&self, src: usize) -> Vec<u32> {
        let mut dist = vec![u32::MAX; self.vertices.len()];
        dist[src] = 0;
        let mut queue = VecDeque::from([src]);
        while let Some(v) = queue.pop_front() {
            for &(e, _) in &self.incidence[v] {
                let w = self.other_end(e, v);
                if dist[w] == u32::MAX {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    /// Graph distance between two vertices (`u32::MAX` if disconnected).
    pub fn distance(&self, a: usize, b: usize) -> u32 {
        let n = self.vertices.len();
        if n <= DISTANCE_TABLE_MAX {
            let table = self.distances.get_or_init(|| {
                let mut t = Vec::with_capacity(n * n);
                for v in 0..n {
                    t.extend(self.bfs_distances(v));
                }
                t
            });
            table[a * n + b]
        } else {
            self.bfs_distances(a)[b]
        }
    }

    /// Diameter, in the graph metric of (V, E), of the endpoint set of `edges`.
    pub fn endpoint_diameter(&self, edges: &[usize]) -> u32 {
        let mut verts: Vec<usize> = edges.iter().flat_map(|&e| [self.edges[e].tail, self.edges[e].head]).collect();
        verts.sort_unstable();
        verts.dedup();
        let mut diam = 0;
        for (i, &a) in verts.iter().enumerate() {
            for &b in &verts[i + 1..] {
                diam = diam.max(self.distance(a, b));
            }
        }
        diam
    }

    /// Fundamental cycle basis from a BFS spanning forest.
    pub fn fundamental_cycles(&self) -> CycleBasis {
        let pairs: Vec<(usize, usize)> = self.edges.iter().map(|e| (e.tail, e.head)).collect();
        let order = lexicographic_order(&self.vertices);
        CycleBasis::from_pairs(self.vertices.len(), &pairs, &order)
    }
}

/// Vertex ids sorted by lexicographic order of their coordinates.
fn lexicographic_order(vertices: &[Vec3]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..vertices.len()).collect();
    order.sort_by(|&a, &b| vertices[a].partial_cmp(&vertices[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    order
}

/// Unit cubic lattice graph on {0..n₁}×{0..n₂}×{0..n₃}, edges oriented along
/// increasing coordinates.
pub fn build_box_graph(extent: [usize; 3]) -> Result<MesoGraph> {
    build_box_graph_capped(extent, DEFAULT_VERTEX_CAP)
}

pub fn build_box_graph_capped(extent: [usize; 3], vertex_cap: usize) -> Result<MesoGraph> {
    let dims = [extent[0] + 1, extent[1] + 1, extent[2] + 1];
    let requested = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).unwrap_or(usize::MAX);
    if requested > vertex_cap {
        return Err(Error::VertexCap { requested, cap: vertex_cap });
    }
    let index = |i: usize, j: usize, k: usize| (i * dims[1] + j) * dims[2] + k;
    let mut vertices = Vec::with_capacity(requested);
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                vertices.push([i as f64, j as f64, k as f64]);
            }
        }
    }
    let mut pairs = Vec::new();
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let v = index(i, j, k);
                if i + 1 < dims[0] {
                    pairs.push((v, index(i + 1, j, k)));
                }
                if j + 1 < dims[1] {
                    pairs.push((v, index(i, j + 1, k)));
                }
                if k + 1 < dims[2] {
                    pairs.push((v, index(i, j, k + 1)));
                }
            }
        }
    }
    MesoGraph::new(vertices, &pairs)
}

/// Fundamental cycle basis of a graph.
///
/// Each non-tree ("chord") edge closes exactly one cycle, in which it carries
/// coefficient +1. The cycle coordinates of a flow are its values on the chords.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleBasis {
    pub num_edges: usize,
    pub cycles: Vec<Vec<i8>>,
    /// Chord edge of each cycle.
    pub chords: Vec<usize>,
    pub tree_edges: Vec<usize>,
}

impl CycleBasis {
    /// Build the basis for `num_vertices` vertices and oriented `pairs`, growing
    /// BFS trees from vertices in the given `order`.
    pub fn from_pairs(num_vertices: usize, pairs: &[(usize, usize)], order: &[usize]) -> Self {
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_vertices];
        for (e, &(t, h)) in pairs.iter().enumerate() {
            adj[t].push((e, h));
            adj[h].push((e, t));
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; num_vertices];
        let mut depth = vec![usize::MAX; num_vertices];
        let mut is_tree = vec![false; pairs.len()];
        for &root in order {
            if depth[root] != usize::MAX {
                continue;
            }
            depth[root] = 0;
            let mut queue = VecDeque::from([root]);
            while let Some(v) = queue.pop_front() {
                for &(e, w) in &adj[v] {
                    if depth[w] == usize::MAX {
                        depth[w] = depth[v] + 1;
                        parent[w] = Some((e, v));
                        is_tree[e] = true;
                        queue.push_back(w);
                    }
                }
            }
        }
        let mut cycles = Vec::new();
        let mut chords = Vec::new();
        let mut tree_edges = Vec::new();
        for (e, &(tail, head)) in pairs.iter().enumerate() {
            if is_tree[e] {
                tree_edges.push(e);
                continue;
            }
            // Traverse tail → head along the chord, then head → tail through the tree.
            let mut c = vec![0i8; pairs.len()];
            c[e] = 1;
            let (mut a, mut b) = (head, tail);
            let mut from_a = Vec::new();
            let mut to_b = Vec::new();
            while a != b {
                if depth[a] >= depth[b] {
                    let (pe, pv) = parent[a].expect("non-root vertex has a parent");
                    from_a.push((pe, a, pv));
                    a = pv;
                } else {
                    let (pe, pv) = parent[b].expect("non-root vertex has a parent");
                    to_b.push((pe, pv, b));
                    b = pv;
                }
            }
            for &(pe, x, y) in from_a.iter().chain(to_b.iter()) {
                // Walking x → y along tree edge pe.
                c[pe] = if pairs[pe] == (x, y) { 1 } else { -1 };
            }
            cycles.push(c);
            chords.push(e);
        }
        CycleBasis { num_edges: pairs.len(), cycles, chords, tree_edges }
    }

    pub fn rank(&self) -> usize {
        self.cycles.len()
    }

    /// Cycle coordinates of an integer flow (its values on the chords).
    pub fn coordinates(&self, flow: &[i64]) -> Vec<i64> {
        self.chords.iter().map(|&e| flow[e]).collect()
    }

    /// Flow Σ_a x_a c_a.
    pub fn reconstruct(&self, coords: &[i64]) -> Vec<i64> {
        let mut flow = vec![0i64; self.num_edges];
        for (c, &x) in self.cycles.iter().zip(coords) {
            if x == 0 {
                continue;
            }
            for (f, &ce) in flow.iter_mut().zip(c) {
                *f += x * ce as i64;
            }
        }
        flow
    }
}

/// Integer residual s·f at every vertex.
pub fn divergence(g: &MesoGraph, flow: &[i64]) -> Vec<i64> {
    (0..g.num_vertices()).map(|v| g.incident(v).iter().map(|&(e, s)| s as i64 * flow[e]).sum()).collect()
}

/// The microscopic Burgers lattice Γ = ℤg₁ + ℤg₂ + ℤg₃.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurgersLattice {
    generators: [Vec3; 3],
    eta: f64,
    /// Rows of the inverse generator matrix: coordinate n_i = row_i · γ.
    inverse_rows: [Vec3; 3],
    #[serde(skip)]
    norm_cache: NormCache,
}

/// Distinct nonzero norms below the exact-sum radius, with multiplicities.
#[derive(Debug, Clone, Default)]
struct NormCache(OnceLock<Vec<(f64, u32)>>);

impl PartialEq for NormCache {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

/// Shells summed exactly in `exp_sum_bound` (in units of η).
const EXACT_SHELLS: usize = 24;

impl BurgersLattice {
    pub fn new(generators: [Vec3; 3]) -> Result<Self> {
        let a = Matrix3::from_columns(&[generators[0].into(), generators[1].into(), generators[2].into()]);
        let det = a.determinant();
        let scale: f64 = generators.iter().map(norm3).product();
        if !(det.abs() > 1e-12 * scale.max(f64::MIN_POSITIVE)) || !det.is_finite() {
            return Err(Error::DegenerateLattice { det });
        }
        let inv = a.try_inverse().ok_or(Error::DegenerateLattice { det })?;
        let inverse_rows = [0, 1, 2].map(|i| [inv[(i, 0)], inv[(i, 1)], inv[(i, 2)]]);
        let mut lattice = BurgersLattice { generators, eta: 0.0, inverse_rows, norm_cache: NormCache::default() };
        let radius = generators.iter().map(norm3).fold(f64::INFINITY, f64::min);
        lattice.eta = lattice
            .ball(radius * (1.0 + 1e-9))
            .into_iter()
            .filter(|n| *n != [0, 0, 0])
            .map(|n| lattice.norm(&n))
            .fold(f64::INFINITY, f64::min);
        Ok(lattice)
    }

    /// Γ = ℤ³.
    pub fn cubic() -> Self {
        Self::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).expect("unit generators are independent")
    }

    pub fn generators(&self) -> &[Vec3; 3] {
        &self.generators
    }

    /// Minimal norm η of a nonzero lattice vector.
    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn vector(&self, n: &[i64; 3]) -> Vec3 {
        let g = &self.generators;
        [0, 1, 2].map(|i| n[0] as f64 * g[0][i] + n[1] as f64 * g[1][i] + n[2] as f64 * g[2][i])
    }

    pub fn norm(&self, n: &[i64; 3]) -> f64 {
        norm3(&self.vector(n))
    }

    /// ‖row_i‖ of the inverse generator matrix, so |n_i| ≤ ‖row_i‖·|γ|.
    pub fn coordinate_norms(&self) -> [f64; 3] {
        self.inverse_rows.map(|row| norm3(&row))
    }

    /// Bound on |n_i| for lattice points with |γ| ≤ radius.
    pub fn coordinate_bounds(&self, radius: f64) -> [i64; 3] {
        self.inverse_rows.map(|row| (radius * norm3(&row) + 1e-9).floor() as i64)
    }

    /// All coordinate triples with |γ| ≤ radius, sorted by norm then lexicographically.
    pub fn ball(&self, radius: f64) -> Vec<[i64; 3]> {
        let b = self.coordinate_bounds(radius);
        let mut out = Vec::new();
        for n0 in -b[0]..=b[0] {
            for n1 in -b[1]..=b[1] {
                for n2 in -b[2]..=b[2] {
                    let n = [n0, n1, n2];
                    if self.norm(&n) <= radius {
                        out.push(n);
                    }
                }
            }
        }
        out.sort_by(|a, b| self.norm(a).partial_cmp(&self.norm(b)).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(b)));
        out
    }

    /// Upper bound on the number of nonzero lattice points with
    /// |γ| ∈ [kη, (k+1)η), from disjointness of the balls of radius η/2.
    pub fn shell_count_bound(k: usize) -> f64 {
        let k = k as f64;
        let outer = k + 1.5;
        let inner = (k - 0.5).max(0.0);
        8.0 * (outer.powi(3) - inner.powi(3))
    }

    fn norms_below_exact_radius(&self) -> &[(f64, u32)] {
        self.norm_cache.0.get_or_init(|| {
            let r = EXACT_SHELLS as f64 * self.eta;
            let b = self.coordinate_bounds(r);
            let mut norms = Vec::new();
            for n0 in -b[0]..=b[0] {
                for n1 in -b[1]..=b[1] {
                    for n2 in -b[2]..=b[2] {
                        let x = self.norm(&[n0, n1, n2]);
                        if x > 0.0 && x < r {
                            norms.push(x);
                        }
                    }
                }
            }
            norms.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut grouped: Vec<(f64, u32)> = Vec::new();
            for x in norms {
                match grouped.last_mut() {
                    Some((y, m)) if *y == x => *m += 1,
                    _ => grouped.push((x, 1)),
                }
            }
            grouped
        })
    }

    /// Rigorous upper bound on Σ_{γ≠0} |γ|^p e^{−b|γ|} for b > 0.
    ///
    /// Lattice points with |γ| < Kη are summed exactly; beyond that the
    /// shell count bound is used with the integrand bounded on each shell.
    pub fn exp_sum_bound(&self, b: f64, p: i32) -> f64 {
        if !(b > 0.0) {
            return f64::INFINITY;
        }
        let eta = self.eta;
        // The shell integrand is decreasing once |γ| > p/b; choose K past that
        // and far enough that the exact part dominates.
        let decay_start = (p.max(0) as f64 / b / eta).ceil() as usize;
        let k_exact = (decay_start + 2).max((40.0 / (b * eta)).ceil() as usize).min(EXACT_SHELLS).max(decay_start + 1);
        let r = k_exact as f64 * eta;
        let exact: f64 = if k_exact <= EXACT_SHELLS {
            self.norms_below_exact_radius()
                .iter()
                .take_while(|(x, _)| *x < r)
                .map(|&(x, m)| m as f64 * x.powi(p) * (-b * x).exp())
                .sum()
        } else {
            self.ball(r)
                .iter()
                .map(|n| self.norm(n))
                .filter(|&x| x > 0.0 && x < r)
                .map(|x| x.powi(p) * (-b * x).exp())
                .sum()
        };
        let mut tail = 0.0;
        let mut k = k_exact;
        loop {
            let kf = k as f64;
            let term = Self::shell_count_bound(k) * (((kf + 1.0) * eta).powi(p)) * (-b * kf * eta).exp();
            tail += term;
            if term < 1e-300 || (k > k_exact + 50 && term < 1e-18 * (exact + tail)) {
                break;
            }
            k += 1;
            if k > k_exact + 100_000 {
                return f64::INFINITY;
            }
        }
        exact + tail
    }
}
