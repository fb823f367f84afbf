//! Experiment configuration: a TOML document with one table per concern.
//!
//! Every table is optional and falls back to the single-square defaults.
//! [`ExperimentConfig::validate`] builds every module object the run needs,
//! so precondition failures surface before any output is written.

use std::path::PathBuf;

use dislocgas_core::burgers::{self, CurrentMeasure, FormFunction};
use dislocgas_core::currents::Current;
use dislocgas_core::elastic::ObservablePoint;
use dislocgas_core::fieldcalc::{ElasticParams, GridSpec};
use dislocgas_core::gibbs::DislocationEnergy;
use dislocgas_core::lattice::{self, BurgersLattice, CycleBasis, MesoGraph};
use dislocgas_core::Vec3;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub graph: GraphConfig,
    pub lattice: LatticeConfig,
    pub elastic: ElasticConfig,
    pub grid: GridConfig,
    pub disl: DislConfig,
    pub observable: ObservableConfig,
    pub energy: EnergyConfig,
    pub calculus: SuiteConfig,
    pub burgers: SuiteConfig,
    pub gibbs: GibbsConfig,
    pub cluster: ClusterConfig,
    pub bound: BoundConfig,
    pub dipole: DipoleConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            out: None,
            threads: None,
            graph: GraphConfig::default(),
            lattice: LatticeConfig::default(),
            elastic: ElasticConfig::default(),
            grid: GridConfig::default(),
            disl: DislConfig::default(),
            observable: ObservableConfig::default(),
            energy: EnergyConfig::default(),
            calculus: SuiteConfig { points: 32, length: 4.0, trials: 50 },
            burgers: SuiteConfig { points: 32, length: 4.0, trials: 50 },
            gibbs: GibbsConfig::default(),
            cluster: ClusterConfig::default(),
            bound: BoundConfig::default(),
            dipole: DipoleConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Box graph with `extent` unit cells per axis.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub extent: [usize; 3],
    pub vertex_cap: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig { extent: [1, 1, 0], vertex_cap: 4096 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatticeConfig {
    pub generators: [Vec3; 3],
}

impl Default for LatticeConfig {
    fn default() -> Self {
        LatticeConfig { generators: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElasticConfig {
    pub lambda: f64,
    pub mu: f64,
    pub phi_radius: f64,
}

impl Default for ElasticConfig {
    fn default() -> Self {
        ElasticConfig { lambda: 1.0, mu: 1.0, phi_radius: burgers::DEFAULT_RADIUS }
    }
}

/// Periodic grid for elastic fields, centred on the graph.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub points: usize,
    pub length: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { points: 32, length: 8.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DislKind {
    Norm1,
    DensityL1,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DislConfig {
    pub kind: DislKind,
    pub c: f64,
}

impl Default for DislConfig {
    fn default() -> Self {
        DislConfig { kind: DislKind::Norm1, c: 1.0 }
    }
}

/// The functional w*_ij(x, I) − w*_ij(y, I) and its Fourier parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservableConfig {
    pub i: usize,
    pub j: usize,
    pub x: Vec3,
    pub y: Vec3,
    pub ts: Vec<f64>,
}

impl Default for ObservableConfig {
    fn default() -> Self {
        ObservableConfig { i: 0, j: 1, x: [0.5, 0.5, 0.5], y: [2.0, -1.0, 0.5], ts: vec![0.5, 1.0, 2.0] }
    }
}

/// Currents given by Γ-coordinates per fundamental cycle.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyConfig {
    pub currents: Vec<Vec<[i64; 3]>>,
    /// Anchor edge and sample points for the observable decay bound.
    pub anchor_edge: usize,
    pub points: Vec<Vec3>,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig {
            currents: vec![vec![[1, 0, 0]]],
            anchor_edge: 0,
            points: vec![[0.5, 0.5, 0.0], [2.0, 0.5, 0.0], [2.5, 2.5, 1.0], [3.5, 0.5, 0.5]],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub points: usize,
    pub length: f64,
    pub trials: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig { points: 32, length: 4.0, trials: 50 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Exact,
    Mcmc,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GibbsConfig {
    pub mode: SampleMode,
    pub betas: Vec<f64>,
    /// Truncation of the exact state space.
    pub norm_cap: f64,
    /// States reported (and compared against the chain) have ‖I‖₁ ≤ this.
    pub report_cap: f64,
    pub steps: u64,
    pub burn_in: u64,
    pub batches: usize,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        GibbsConfig {
            mode: SampleMode::Exact,
            betas: vec![1.0, 2.0, 4.0],
            norm_cap: 24.0,
            report_cap: 4.0,
            steps: 1_000_000,
            burn_in: 20_000,
            batches: 40,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub betas: Vec<f64>,
    pub size_cap: f64,
    pub n_max: usize,
    /// State-space cap for the brute-force log-partition identity.
    pub norm_cap: f64,
    pub identity: bool,
    /// Number of ± pairs of test vectors φ besides φ = 0.
    pub identity_pairs: usize,
    pub peierls: bool,
    pub peierls_betas: Vec<f64>,
    /// Degree of the ambient mesoscopic lattice in the path count.
    pub lambda_degree: usize,
    pub kp_beta: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            betas: vec![6.0],
            size_cap: 10.0,
            n_max: 4,
            norm_cap: 24.0,
            identity: true,
            identity_pairs: 3,
            peierls: true,
            peierls_betas: vec![0.1, 1.0, 5.0, 10.0, 20.0, 40.0, 80.0, 160.0, 240.0],
            lambda_degree: 6,
            kp_beta: 160.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundConfig {
    pub betas: Vec<f64>,
    /// Cluster truncation for the Gaussian bound.
    pub size_cap: f64,
    pub n_max: usize,
    pub norm_cap: f64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        BoundConfig { betas: vec![3.0, 4.0, 5.0, 6.0, 7.0, 8.0], size_cap: 14.0, n_max: 3, norm_cap: 24.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DipoleConfig {
    pub bump_radius: f64,
    pub shift: Vec3,
    pub samples: usize,
    /// Wedge grid resolutions for the uniform kernel bounds, coarse to fine.
    pub uniform_grids: Vec<usize>,
}

impl Default for DipoleConfig {
    fn default() -> Self {
        DipoleConfig { bump_radius: 1.0, shift: [0.4, 0.2, -0.1], samples: 50, uniform_grids: vec![5, 9] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub betas: Vec<f64>,
    pub norm_cap: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { betas: vec![3.0, 4.0, 5.0, 6.0, 7.0, 8.0], norm_cap: 24.0 }
    }
}

/// Module objects built from a validated configuration.
pub struct Setup {
    pub graph: MesoGraph,
    pub cycles: CycleBasis,
    pub lattice: BurgersLattice,
    pub params: ElasticParams,
    pub phi: FormFunction,
    pub grid: GridSpec,
    pub hd: DislocationEnergy,
    pub currents: Vec<Current>,
}

impl Setup {
    pub fn observables(&self, cfg: &ObservableConfig) -> [ObservablePoint; 2] {
        [ObservablePoint { i: cfg.i, j: cfg.j, x: cfg.x }, ObservablePoint { i: cfg.i, j: cfg.j, x: cfg.y }]
    }
}

fn require(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn positive_list(name: &str, values: &[f64]) -> Result<(), String> {
    require(!values.is_empty(), || format!("{name} must not be empty"))?;
    for &v in values {
        require(v.is_finite() && v > 0.0, || format!("{name} entries must be finite and positive (got {v})"))?;
    }
    Ok(())
}

fn increasing(name: &str, values: &[f64]) -> Result<(), String> {
    require(values.windows(2).all(|w| w[1] > w[0]), || format!("{name} must be strictly increasing"))
}

fn nonnegative(name: &str, v: f64) -> Result<(), String> {
    require(v.is_finite() && v >= 0.0, || format!("{name} must be finite and non-negative (got {v})"))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Check every precondition and build the shared module objects.
    pub fn validate(&self) -> Result<Setup, String> {
        let e = |err: dislocgas_core::Error| err.to_string();
        let graph = lattice::build_box_graph_capped(self.graph.extent, self.graph.vertex_cap).map_err(e)?;
        let cycles = graph.fundamental_cycles();
        let lat = BurgersLattice::new(self.lattice.generators).map_err(e)?;
        let params = ElasticParams::new(self.elastic.lambda, self.elastic.mu).map_err(e)?;
        let phi = FormFunction::new(self.elastic.phi_radius).map_err(e)?;
        let center = graph_center(&graph);
        let grid = GridSpec::new(self.grid.points, self.grid.length, center).map_err(e)?;
        let all_edges = Current { values: vec![[1, 0, 0]; graph.num_edges()] };
        burgers::check_box_fit(&CurrentMeasure::new(&graph, &lat, &all_edges), &phi, &grid).map_err(e)?;
        for (name, s) in [("calculus", &self.calculus), ("burgers", &self.burgers)] {
            GridSpec::new(s.points, s.length, center).map_err(|err| format!("{name}: {err}"))?;
            require(s.trials > 0, || format!("{name}.trials must be positive"))?;
        }
        let bgrid = GridSpec::new(self.burgers.points, self.burgers.length, center).map_err(e)?;
        burgers::check_box_fit(&CurrentMeasure::new(&graph, &lat, &all_edges), &phi, &bgrid)
            .map_err(|err| format!("burgers: {err}"))?;
        let hd = match self.disl.kind {
            DislKind::Norm1 => DislocationEnergy::norm1(self.disl.c),
            DislKind::DensityL1 => DislocationEnergy::density_l1(self.disl.c, self.elastic.phi_radius),
        }
        .map_err(e)?;

        let o = &self.observable;
        require(o.i < 3 && o.j < 3, || format!("observable indices must be below 3 (got {}, {})", o.i, o.j))?;
        positive_list("observable.ts", &o.ts)?;
        let mut currents = Vec::with_capacity(self.energy.currents.len());
        require(!self.energy.currents.is_empty(), || "energy.currents must not be empty".into())?;
        for (k, coords) in self.energy.currents.iter().enumerate() {
            require(coords.len() == cycles.rank(), || {
                format!(
                    "energy.currents[{k}] has {} cycle coordinates but the graph has {} fundamental cycles",
                    coords.len(),
                    cycles.rank()
                )
            })?;
            currents.push(Current::from_cycle_coords(&cycles, coords));
        }
        require(self.energy.anchor_edge < graph.num_edges(), || {
            format!("energy.anchor_edge {} is not an edge (graph has {})", self.energy.anchor_edge, graph.num_edges())
        })?;

        let g = &self.gibbs;
        positive_list("gibbs.betas", &g.betas)?;
        nonnegative("gibbs.norm_cap", g.norm_cap)?;
        nonnegative("gibbs.report_cap", g.report_cap)?;
        require(g.report_cap <= g.norm_cap, || "gibbs.report_cap must not exceed gibbs.norm_cap".into())?;
        require(g.burn_in < g.steps, || "gibbs.burn_in must be below gibbs.steps".into())?;
        require(g.batches >= 2, || "gibbs.batches must be at least 2".into())?;

        let c = &self.cluster;
        positive_list("cluster.betas", &c.betas)?;
        positive_list("cluster.peierls_betas", &c.peierls_betas)?;
        increasing("cluster.peierls_betas", &c.peierls_betas)?;
        nonnegative("cluster.size_cap", c.size_cap)?;
        nonnegative("cluster.norm_cap", c.norm_cap)?;
        require((1..=6).contains(&c.n_max), || format!("cluster.n_max must lie in 1..=6 (got {})", c.n_max))?;
        require(c.kp_beta.is_finite() && c.kp_beta > 0.0, || "cluster.kp_beta must be positive".into())?;
        require(c.lambda_degree >= graph.max_degree(), || {
            format!("cluster.lambda_degree must be at least the graph degree {}", graph.max_degree())
        })?;

        let b = &self.bound;
        positive_list("bound.betas", &b.betas)?;
        nonnegative("bound.size_cap", b.size_cap)?;
        nonnegative("bound.norm_cap", b.norm_cap)?;
        require((1..=6).contains(&b.n_max), || format!("bound.n_max must lie in 1..=6 (got {})", b.n_max))?;

        let d = &self.dipole;
        require(d.bump_radius.is_finite() && d.bump_radius > 0.0, || "dipole.bump_radius must be positive".into())?;
        require(d.shift.iter().all(|v| v.is_finite()), || "dipole.shift must be finite".into())?;
        require(d.samples > 0, || "dipole.samples must be positive".into())?;
        require(!d.uniform_grids.is_empty() && d.uniform_grids.iter().all(|&n| n >= 2), || {
            "dipole.uniform_grids entries must be at least 2".into()
        })?;

        positive_list("sweep.betas", &self.sweep.betas)?;
        require(self.sweep.betas.len() >= 2, || "sweep.betas needs at least two values".into())?;
        increasing("sweep.betas", &self.sweep.betas)?;
        nonnegative("sweep.norm_cap", self.sweep.norm_cap)?;
        if let Some(t) = self.threads {
            require(t > 0, || "threads must be positive".into())?;
        }

        Ok(Setup { graph, cycles, lattice: lat, params, phi, grid, hd, currents })
    }
}

/// Centroid of the vertex set.
pub fn graph_center(g: &MesoGraph) -> Vec3 {
    let n = g.num_vertices() as f64;
    let mut c = [0.0; 3];
    for v in g.vertices() {
        for a in 0..3 {
            c[a] += v[a] / n;
        }
    }
    c
}
