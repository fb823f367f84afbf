//! Γ-valued edge currents, Kirchhoff's node law, support combinatorics and
//! polymer enumeration.

use serde::{Deserialize, Serialize};

use crate::lattice::{BurgersLattice, CycleBasis, MesoGraph};
use crate::{Error, Result, Vec3};

/// Default limit on search nodes visited by the enumerators.
pub const DEFAULT_BUDGET: u64 = 200_000_000;

/// A current: one Γ-coordinate triple per edge of its graph.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Current {
    pub values: Vec<[i64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EdgeRecord {
    edge_id: usize,
    coords: [i64; 3],
}

impl Current {
    pub fn zero(num_edges: usize) -> Self {
        Current { values: vec![[0; 3]; num_edges] }
    }

    pub fn num_edges(&self) -> usize {
        self.values.len()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == [0, 0, 0])
    }

    pub fn support(&self) -> Vec<usize> {
        (0..self.values.len()).filter(|&e| self.values[e] != [0, 0, 0]).collect()
    }

    /// The current γ·c for an integer edge vector `c`.
    pub fn from_cycle(cycle: &[i8], gamma: [i64; 3]) -> Self {
        Current { values: cycle.iter().map(|&c| gamma.map(|x| x * c as i64)).collect() }
    }

    /// Σ_a x_a ⊗ c_a for Γ-valued cycle coordinates x.
    pub fn from_cycle_coords(basis: &CycleBasis, coords: &[[i64; 3]]) -> Self {
        let mut cur = Current::zero(basis.num_edges);
        for (c, x) in basis.cycles.iter().zip(coords) {
            if *x == [0, 0, 0] {
                continue;
            }
            for (v, &ce) in cur.values.iter_mut().zip(c) {
                if ce != 0 {
                    for k in 0..3 {
                        v[k] += x[k] * ce as i64;
                    }
                }
            }
        }
        cur
    }

    /// Γ-valued cycle coordinates (values on the chords).
    pub fn cycle_coords(&self, basis: &CycleBasis) -> Vec<[i64; 3]> {
        basis.chords.iter().map(|&e| self.values[e]).collect()
    }

    pub fn add(&self, other: &Current) -> Current {
        Current {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| [a[0] + b[0], a[1] + b[1], a[2] + b[2]])
                .collect(),
        }
    }

    pub fn scale(&self, s: i64) -> Current {
        Current { values: self.values.iter().map(|v| v.map(|x| s * x)).collect() }
    }

    /// Restriction I·1_X.
    pub fn restrict(&self, edges: &[usize]) -> Current {
        let mut out = Current::zero(self.values.len());
        for &e in edges {
            out.values[e] = self.values[e];
        }
        out
    }

    /// Burgers vectors I_e ∈ ℝ³.
    pub fn vectors(&self, lattice: &BurgersLattice) -> Vec<Vec3> {
        self.values.iter().map(|n| lattice.vector(n)).collect()
    }

    /// ‖I‖₁ = Σ_e |I_e|.
    pub fn norm1(&self, lattice: &BurgersLattice) -> f64 {
        self.values.iter().map(|n| lattice.norm(n)).sum()
    }

    /// One JSON record per edge: `{"edge_id":…,"coords":[…]}`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (edge_id, &coords) in self.values.iter().enumerate() {
            let rec = EdgeRecord { edge_id, coords };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, num_edges: usize) -> Result<Self> {
        let mut cur = Current::zero(num_edges);
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let rec: EdgeRecord = serde_json::from_str(line)?;
            if rec.edge_id >= num_edges {
                return Err(Error::invalid(format!("edge id {} out of range for {num_edges} edges", rec.edge_id)));
            }
            cur.values[rec.edge_id] = rec.coords;
        }
        Ok(cur)
    }
}

/// Result of checking Kirchhoff's node law.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KirchhoffReport {
    pub valid: bool,
    /// Violating vertices with their residual Σ_e s_ve I_e (Γ-coordinates).
    pub violations: Vec<(usize, [i64; 3])>,
}

pub fn kirchhoff_check(g: &MesoGraph, i: &Current) -> KirchhoffReport {
    let mut violations = Vec::new();
    for v in 0..g.num_vertices() {
        let mut r = [0i64; 3];
        for &(e, s) in g.incident(v) {
            for k in 0..3 {
                r[k] += s as i64 * i.values[e][k];
            }
        }
        if r != [0, 0, 0] {
            violations.push((v, r));
        }
    }
    KirchhoffReport { valid: violations.is_empty(), violations }
}

fn require_kirchhoff(g: &MesoGraph, i: &Current) -> Result<()> {
    let report = kirchhoff_check(g, i);
    match report.violations.first() {
        None => Ok(()),
        Some(&(first, _)) => Err(Error::Kirchhoff { count: report.violations.len(), first }),
    }
}

/// A current with nonempty, connected support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polymer {
    pub current: Current,
    pub support: Vec<usize>,
    /// Sorted endpoint set of the support.
    pub vertices: Vec<usize>,
    pub norm1: f64,
    pub size: f64,
}

impl Polymer {
    /// Wrap a current with connected nonempty support (connectivity is not checked here).
    pub fn new(g: &MesoGraph, lattice: &BurgersLattice, current: Current) -> Result<Self> {
        let support = current.support();
        if support.is_empty() {
            return Err(Error::EmptySupport { what: "polymer" });
        }
        let norm1 = current.norm1(lattice);
        let size = norm1 + g.endpoint_diameter(&support) as f64;
        let mut vertices: Vec<usize> = support.iter().flat_map(|&e| [g.edge(e).tail, g.edge(e).head]).collect();
        vertices.sort_unstable();
        vertices.dedup();
        Ok(Polymer { current, support, vertices, norm1, size })
    }
}

/// size I = ‖I‖₁ + diam(endpoints of supp I).
pub fn size_of(g: &MesoGraph, lattice: &BurgersLattice, i: &Current) -> Result<f64> {
    let support = i.support();
    if support.is_empty() {
        return Err(Error::EmptySupport { what: "size" });
    }
    Ok(i.norm1(lattice) + g.endpoint_diameter(&support) as f64)
}

/// True iff some support edge of `a` shares a vertex with some support edge of `b`.
pub fn incompatible(a: &Polymer, b: &Polymer) -> bool {
    let (mut i, mut j) = (0, 0);
    while i < a.vertices.len() && j < b.vertices.len() {
        match a.vertices[i].cmp(&b.vertices[j]) {
            std::cmp::Ordering::Equal => return true,
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
        }
    }
    false
}

/// Connected components of an edge set under the shared-vertex relation, each sorted.
pub fn edge_components(g: &MesoGraph, edges: &[usize]) -> Vec<Vec<usize>> {
    let mut in_set = vec![false; g.num_edges()];
    for &e in edges {
        in_set[e] = true;
    }
    let mut seen = vec![false; g.num_edges()];
    let mut comps = Vec::new();
    for &start in edges {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = vec![start];
        let mut stack = vec![start];
        while let Some(e) = stack.pop() {
            let ed = g.edge(e);
            for v in [ed.tail, ed.head] {
                for &(f, _) in g.incident(v) {
                    if in_set[f] && !seen[f] {
                        seen[f] = true;
                        comp.push(f);
                        stack.push(f);
                    }
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps.sort();
    comps
}

/// Split a Kirchhoff current into polymers over the connected components of its support.
pub fn decompose(g: &MesoGraph, lattice: &BurgersLattice, i: &Current) -> Result<Vec<Polymer>> {
    require_kirchhoff(g, i)?;
    let mut out = Vec::new();
    for comp in edge_components(g, &i.support()) {
        let part = i.restrict(&comp);
        require_kirchhoff(g, &part)?;
        out.push(Polymer::new(g, lattice, part)?);
    }
    Ok(out)
}

/// Constants of the cluster expansion derived from the H_disl lower bound `c` and η.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpansionConstants {
    pub c: f64,
    pub eta: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub c6: f64,
}

impl ExpansionConstants {
    /// Constants with the default c5 = c4/2.
    pub fn new(c: f64, eta: f64) -> Result<Self> {
        let c4 = c / (2.0 * (1.0 + 1.0 / eta));
        Self::with_c5(c, eta, c4 / 2.0)
    }

    pub fn with_c5(c: f64, eta: f64, c5: f64) -> Result<Self> {
        if !(c > 0.0) || !(eta > 0.0) {
            return Err(Error::invalid(format!("need c > 0 and eta > 0 (c = {c}, eta = {eta})")));
        }
        let c3 = 1.0 + 1.0 / eta;
        let c4 = c / (2.0 * c3);
        if !(c5 > 0.0 && c5 < c4) {
            return Err(Error::invalid(format!("c5 = {c5} must lie in (0, c4 = {c4})")));
        }
        Ok(ExpansionConstants { c, eta, c3, c4, c5, c6: c4 - c5 })
    }
}

/// Depth-first search over Kirchhoff currents spanned by a cycle basis, with
/// chord values drawn from a Γ-ball and pruning on the 1-norm.
pub(crate) struct KirchhoffSearch<'a> {
    lattice: &'a BurgersLattice,
    basis: &'a CycleBasis,
    cycles: Vec<Vec<(usize, i64)>>,
    /// Tree edges whose value is fixed once chords 0..=s are assigned.
    determined_after: Vec<Vec<usize>>,
    candidates: Vec<([i64; 3], f64)>,
    norm_cap: f64,
    nonzero: bool,
    pub visited: u64,
    pub budget: u64,
}

/// Callback receiving chord values and the edge flow of one current.
pub type CurrentVisitor<'v> = dyn FnMut(&[[i64; 3]], &[[i64; 3]]) + 'v;

impl<'a> KirchhoffSearch<'a> {
    /// `nonzero` demands every edge of the graph carries a nonzero value.
    pub fn new(lattice: &'a BurgersLattice, basis: &'a CycleBasis, norm_cap: f64, nonzero: bool, budget: u64) -> Self {
        let cycles: Vec<Vec<(usize, i64)>> = basis
            .cycles
            .iter()
            .map(|c| c.iter().enumerate().filter(|(_, &x)| x != 0).map(|(e, &x)| (e, x as i64)).collect())
            .collect();
        let mut last_cycle = vec![None; basis.num_edges];
        for (a, c) in cycles.iter().enumerate() {
            for &(e, _) in c {
                last_cycle[e] = Some(a);
            }
        }
        let mut determined_after = vec![Vec::new(); cycles.len()];
        for &t in &basis.tree_edges {
            if let Some(a) = last_cycle[t] {
                determined_after[a].push(t);
            }
        }
        let tol = 1e-9 * norm_cap.abs().max(1.0);
        let candidates = lattice
            .ball(norm_cap.max(0.0) + tol)
            .into_iter()
            .filter(|n| !(nonzero && *n == [0, 0, 0]))
            .map(|n| (n, lattice.norm(&n)))
            .collect();
        KirchhoffSearch { lattice, basis, cycles, determined_after, candidates, norm_cap, nonzero, visited: 0, budget }
    }

    /// Visit every Kirchhoff current with ‖I‖₁ ≤ norm_cap (and all edges
    /// nonzero if requested). The callback receives chord values and the flow.
    pub fn run(&mut self, visit: &mut CurrentVisitor) -> Result<()> {
        let rank = self.cycles.len();
        if self.nonzero
            && self.basis.tree_edges.iter().any(|&t| self.cycles.iter().all(|c| c.iter().all(|&(e, _)| e != t)))
        {
            // A tree edge in no cycle always carries zero.
            return Ok(());
        }
        let mut flow = vec![[0i64; 3]; self.basis.num_edges];
        let mut chosen = vec![[0i64; 3]; rank];
        if rank == 0 {
            if !self.nonzero || self.basis.num_edges == 0 {
                visit(&chosen, &flow);
            }
            return Ok(());
        }
        self.descend(0, 0.0, &mut flow, &mut chosen, visit)
    }

    fn descend(
        &mut self,
        step: usize,
        partial: f64,
        flow: &mut Vec<[i64; 3]>,
        chosen: &mut Vec<[i64; 3]>,
        visit: &mut CurrentVisitor,
    ) -> Result<()> {
        let rank = self.cycles.len();
        let eta = self.lattice.eta();
        let tol = 1e-9 * self.norm_cap.abs().max(1.0);
        let remaining_min = if self.nonzero { (rank - step - 1) as f64 * eta } else { 0.0 };
        for ci in 0..self.candidates.len() {
            let (gamma, gnorm) = self.candidates[ci];
            if partial + gnorm + remaining_min > self.norm_cap + tol {
                break;
            }
            self.visited += 1;
            if self.visited > self.budget {
                return Err(Error::Budget {
                    what: "Kirchhoff current search".into(),
                    budget: self.budget,
                    estimate: self.visited as f64 * 2.0,
                });
            }
            for &(e, s) in &self.cycles[step] {
                for k in 0..3 {
                    flow[e][k] += s * gamma[k];
                }
            }
            chosen[step] = gamma;
            let mut bound = partial + gnorm;
            let mut ok = true;
            for &t in &self.determined_after[step] {
                if self.nonzero && flow[t] == [0, 0, 0] {
                    ok = false;
                    break;
                }
                bound += self.lattice.norm(&flow[t]);
            }
            if ok && bound + remaining_min <= self.norm_cap + tol {
                if step + 1 == rank {
                    visit(chosen, flow);
                } else {
                    self.descend(step + 1, bound, flow, chosen, visit)?;
                }
            }
            for &(e, s) in &self.cycles[step] {
                for k in 0..3 {
                    flow[e][k] -= s * gamma[k];
                }
            }
        }
        chosen[step] = [0, 0, 0];
        Ok(())
    }
}

/// Visit every connected edge set X (shared-vertex connectivity) exactly once,
/// in canonical minimal-edge-anchored order. `keep` prunes a set and all its
/// supersets when it returns false.
pub fn for_each_connected_edge_set(
    g: &MesoGraph,
    max_edges: usize,
    keep: &mut dyn FnMut(&[usize]) -> bool,
    visit: &mut dyn FnMut(&[usize]) -> Result<()>,
) -> Result<()> {
    let ne = g.num_edges();
    let neighbors: Vec<Vec<usize>> = (0..ne).map(|e| g.edge_neighbors(e)).collect();
    for anchor in 0..ne {
        let sub = vec![anchor];
        if !keep(&sub) {
            continue;
        }
        let ext: Vec<usize> = neighbors[anchor].iter().copied().filter(|&f| f > anchor).collect();
        let mut in_closure = vec![false; ne];
        in_closure[anchor] = true;
        for &f in &neighbors[anchor] {
            in_closure[f] = true;
        }
        esu_extend(anchor, sub, ext, in_closure, &neighbors, max_edges, keep, visit)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn esu_extend(
    anchor: usize,
    sub: Vec<usize>,
    mut ext: Vec<usize>,
    in_closure: Vec<bool>,
    neighbors: &[Vec<usize>],
    max_edges: usize,
    keep: &mut dyn FnMut(&[usize]) -> bool,
    visit: &mut dyn FnMut(&[usize]) -> Result<()>,
) -> Result<()> {
    visit(&sub)?;
    if sub.len() >= max_edges {
        return Ok(());
    }
    while let Some(w) = ext.pop() {
        let mut next = sub.clone();
        next.push(w);
        next.sort_unstable();
        if !keep(&next) {
            continue;
        }
        let mut next_ext = ext.clone();
        let mut next_closure = in_closure.clone();
        for &u in &neighbors[w] {
            if u > anchor && !in_closure[u] {
                next_ext.push(u);
            }
            next_closure[u] = true;
        }
        esu_extend(anchor, next, next_ext, next_closure, neighbors, max_edges, keep, visit)?;
    }
    Ok(())
}

/// All polymers with size ≤ `size_cap`, sorted canonically (size, support, values).
pub fn enumerate_polymers(g: &MesoGraph, lattice: &BurgersLattice, size_cap: f64) -> Result<Vec<Polymer>> {
    enumerate_polymers_with_budget(g, lattice, size_cap, DEFAULT_BUDGET)
}

pub fn enumerate_polymers_with_budget(
    g: &MesoGraph,
    lattice: &BurgersLattice,
    size_cap: f64,
    budget: u64,
) -> Result<Vec<Polymer>> {
    let eta = lattice.eta();
    let tol = 1e-9 * size_cap.abs().max(1.0);
    let max_edges = ((size_cap + tol) / eta).floor().max(0.0) as usize;
    let mut polymers = Vec::new();
    let mut visited: u64 = 0;
    let mut keep = |x: &[usize]| x.len() as f64 * eta + g.endpoint_diameter(x) as f64 <= size_cap + tol;
    let mut visit = |x: &[usize]| -> Result<()> {
        visited += 1;
        if visited > budget {
            return Err(Error::Budget {
                what: format!("polymer enumeration at size cap {size_cap}"),
                budget,
                estimate: visited as f64 * 2.0,
            });
        }
        let diam = g.endpoint_diameter(x) as f64;
        let local = LocalGraph::new(g, x);
        if local.has_leaf() {
            return Ok(());
        }
        let basis = local.cycle_basis();
        let mut search = KirchhoffSearch::new(lattice, &basis, size_cap - diam, true, budget - visited);
        let mut found = Vec::new();
        search.run(&mut |_, flow| found.push(flow.to_vec()))?;
        visited += search.visited;
        for flow in found {
            let mut cur = Current::zero(g.num_edges());
            for (li, &e) in x.iter().enumerate() {
                cur.values[e] = flow[li];
            }
            polymers.push(Polymer::new(g, lattice, cur)?);
        }
        Ok(())
    };
    for_each_connected_edge_set(g, max_edges, &mut keep, &mut visit)?;
    polymers.retain(|p| p.size <= size_cap + tol);
    sort_polymers(&mut polymers);
    Ok(polymers)
}

pub(crate) fn sort_polymers(polymers: &mut [Polymer]) {
    polymers.sort_by(|a, b| {
        a.size
            .partial_cmp(&b.size)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.support.cmp(&b.support))
            .then_with(|| a.current.cmp(&b.current))
    });
}

/// The subgraph spanned by an edge set, with local vertex and edge numbering.
pub(crate) struct LocalGraph {
    pub num_vertices: usize,
    pub pairs: Vec<(usize, usize)>,
    order: Vec<usize>,
}

impl LocalGraph {
    pub fn new(g: &MesoGraph, edges: &[usize]) -> Self {
        let mut verts: Vec<usize> = edges.iter().flat_map(|&e| [g.edge(e).tail, g.edge(e).head]).collect();
        verts.sort_unstable();
        verts.dedup();
        let local = |v: usize| verts.binary_search(&v).expect("endpoint present");
        let pairs = edges.iter().map(|&e| (local(g.edge(e).tail), local(g.edge(e).head))).collect();
        let mut order: Vec<usize> = (0..verts.len()).collect();
        order.sort_by(|&a, &b| {
            g.vertex(verts[a]).partial_cmp(&g.vertex(verts[b])).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        LocalGraph { num_vertices: verts.len(), pairs, order }
    }

    /// True if some vertex has degree one (no Kirchhoff current can cover all edges).
    pub fn has_leaf(&self) -> bool {
        let mut deg = vec![0usize; self.num_vertices];
        for &(t, h) in &self.pairs {
            deg[t] += 1;
            deg[h] += 1;
        }
        deg.contains(&1)
    }

    pub fn cycle_basis(&self) -> CycleBasis {
        CycleBasis::from_pairs(self.num_vertices, &self.pairs, &self.order)
    }
}
