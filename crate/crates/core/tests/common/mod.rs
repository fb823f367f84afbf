#![allow(dead_code)]

pub mod oracles;

use dislocgas_core::burgers::FormFunction;
use dislocgas_core::currents::Current;
use dislocgas_core::fieldcalc::{ElasticParams, GridSpec};
use dislocgas_core::lattice::{build_box_graph, BurgersLattice, CycleBasis, MesoGraph};

/// A graph with its cycle basis on the cubic Burgers lattice.
pub struct System {
    pub graph: MesoGraph,
    pub cycles: CycleBasis,
    pub lattice: BurgersLattice,
}

impl System {
    pub fn boxed(extent: [usize; 3]) -> Self {
        let graph = build_box_graph(extent).unwrap();
        let cycles = graph.fundamental_cycles();
        System { graph, cycles, lattice: BurgersLattice::cubic() }
    }

    /// The unit square in the xy-plane.
    pub fn square() -> Self {
        Self::boxed([1, 1, 0])
    }

    pub fn domino() -> Self {
        Self::boxed([2, 1, 0])
    }

    pub fn cube() -> Self {
        Self::boxed([1, 1, 1])
    }

    /// Current with Γ-coordinates `gamma` around cycle `c`.
    pub fn loop_current(&self, c: usize, gamma: [i64; 3]) -> Current {
        Current::from_cycle(&self.cycles.cycles[c], gamma)
    }

    pub fn current(&self, coords: &[[i64; 3]]) -> Current {
        Current::from_cycle_coords(&self.cycles, coords)
    }

    /// A grid of `n` points per axis and side `l`, centred on the graph.
    pub fn grid(&self, n: usize, l: f64) -> GridSpec {
        let vs = self.graph.vertices();
        let mut c = [0.0; 3];
        for v in vs {
            for a in 0..3 {
                c[a] += v[a] / vs.len() as f64;
            }
        }
        GridSpec::new(n, l, c).unwrap()
    }
}

pub fn phi() -> FormFunction {
    FormFunction::new(0.2).unwrap()
}

pub fn unit_params() -> ElasticParams {
    ElasticParams::new(1.0, 1.0).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

impl System {
    /// Loop ⊗ γ around the unit face spanned by axes `a`, `b` at `corner`.
    pub fn face_loop(&self, corner: [f64; 3], a: usize, b: usize, gamma: [i64; 3]) -> Current {
        let mut p = [corner; 4];
        p[1][a] += 1.0;
        p[2][a] += 1.0;
        p[2][b] += 1.0;
        p[3][b] += 1.0;
        let vid = |x: &[f64; 3]| {
            self.graph
                .vertices()
                .iter()
                .position(|v| (0..3).all(|k| (v[k] - x[k]).abs() < 1e-9))
                .expect("face corner is a vertex")
        };
        let ids: Vec<usize> = p.iter().map(vid).collect();
        let mut values = vec![[0i64; 3]; self.graph.num_edges()];
        for s in 0..4 {
            let (u, v) = (ids[s], ids[(s + 1) % 4]);
            let (e, sign) = self
                .graph
                .edges()
                .iter()
                .enumerate()
                .find_map(|(e, ed)| match (ed.tail == u && ed.head == v, ed.tail == v && ed.head == u) {
                    (true, _) => Some((e, 1)),
                    (_, true) => Some((e, -1)),
                    _ => None,
                })
                .expect("face side is an edge");
            values[e] = gamma.map(|g| sign * g);
        }
        Current { values }
    }
}
