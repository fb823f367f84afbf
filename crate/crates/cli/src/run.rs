//! Subcommand bodies. Each returns tables of module outputs and a verdict;
//! all numbers come from core operations.

use dislocgas_core::burgers;
use dislocgas_core::cluster::{self, PeierlsConstants, PolymerFamily};
use dislocgas_core::currents::{self, Current, ExpansionConstants};
use dislocgas_core::dipole::{self, ChargeDensity, RemainderReport};
use dislocgas_core::elastic::{self, GramForm, ObservableFunctional};
use dislocgas_core::fieldcalc::{self, GridSpec};
use dislocgas_core::gibbs::{self, ChainConfig, Ensemble};
use dislocgas_core::report::{CheckRow, Verdict};
use serde::Serialize;
use tracing::info;

use crate::artifacts::Output;
use crate::config::{graph_center, ExperimentConfig, SampleMode, Setup};

type Res<T> = Result<T, String>;

fn core<T>(r: dislocgas_core::Result<T>) -> Res<T> {
    r.map_err(|e| e.to_string())
}

/// Γ-coordinates joined as `a,b,c;…` for CSV cells.
fn coords_label(coords: &[i64]) -> String {
    coords
        .chunks(3)
        .map(|c| c.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join(";")
}

fn current_label(i: &Current, s: &Setup) -> String {
    coords_label(&gibbs::flat_coords(i, &s.cycles))
}

fn checks(out: &mut Output, rows: &[CheckRow]) -> Res<()> {
    out.table("checks", rows)
}

pub fn verify_calculus(cfg: &ExperimentConfig, s: &Setup, seed: u64) -> Res<Output> {
    let c = &cfg.calculus;
    let grid = core(GridSpec::new(c.points, c.length, graph_center(&s.graph)))?;
    info!(points = c.points, trials = c.trials, "operator identity suite");
    let rep = core(fieldcalc::identity_suite(&grid, &s.params, c.trials, seed))?;
    let mut out = Output::new(rep.verdict);
    checks(&mut out, &rep.rows)?;
    Ok(out)
}

pub fn verify_burgers(cfg: &ExperimentConfig, s: &Setup, seed: u64) -> Res<Output> {
    let c = &cfg.burgers;
    let grid = core(GridSpec::new(c.points, c.length, graph_center(&s.graph)))?;
    info!(points = c.points, trials = c.trials, "source-freeness suite");
    let rep = core(burgers::sourceless_suite(&s.graph, &s.lattice, &s.phi, &grid, c.trials, seed))?;
    let mut out = Output::new(rep.verdict);
    checks(&mut out, &rep.rows)?;
    Ok(out)
}

#[derive(Serialize)]
struct EnergyRow {
    current: String,
    norm1: f64,
    energy: f64,
    integrability_defect: f64,
    constraint_defect: f64,
    orthogonality_defect: f64,
}

/// Relative tolerance on the minimizer residuals.
const MINIMIZER_TOL: f64 = 1e-8;

pub fn energy(_cfg: &ExperimentConfig, s: &Setup) -> Res<Output> {
    let mut rows = Vec::new();
    let mut ok = true;
    for i in &s.currents {
        let m = core(elastic::minimize(&s.graph, &s.lattice, i, &s.phi, &s.grid, &s.params))?;
        let d = core(m.defects(&s.params))?;
        ok &= d.constraint <= MINIMIZER_TOL && d.orthogonality <= MINIMIZER_TOL;
        info!(current = current_label(i, s), energy = m.energy, "minimized");
        rows.push(EnergyRow {
            current: current_label(i, s),
            norm1: i.norm1(&s.lattice),
            energy: m.energy,
            integrability_defect: d.integrability,
            constraint_defect: d.constraint,
            orthogonality_defect: d.orthogonality,
        });
    }
    let mut out = Output::new(Verdict::from_bool(ok));
    out.note("tolerance", MINIMIZER_TOL);
    out.table("energy", &rows)?;
    Ok(out)
}

fn gram(cfg: &ExperimentConfig, s: &Setup) -> Res<GramForm> {
    info!(dim = 3 * s.cycles.rank(), points = s.grid.n(), "assembling Gram form");
    core(elastic::gram_form(
        &s.graph,
        &s.cycles,
        &s.lattice,
        &s.phi,
        &s.grid,
        &s.params,
        &s.observables(&cfg.observable),
    ))
}

fn sigma(cfg: &ExperimentConfig, q: &GramForm) -> Res<ObservableFunctional> {
    let o = &cfg.observable;
    core(q.observable(o.i, o.j, &o.x, &o.y))
}

#[derive(Serialize)]
struct GramEntry {
    a: usize,
    b: usize,
    value: f64,
}

#[derive(Serialize)]
struct IndexedValue {
    index: usize,
    value: f64,
}

pub fn gram_cmd(cfg: &ExperimentConfig, s: &Setup) -> Res<Output> {
    let q = gram(cfg, s)?;
    let entries: Vec<GramEntry> = (0..q.dim)
        .flat_map(|a| (0..q.dim).map(move |b| (a, b)))
        .map(|(a, b)| GramEntry { a, b, value: q.entry(a, b) })
        .collect();
    let (eig, _) = q.eigen();
    let scale = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let psd = eig.first().is_none_or(|&v| v >= -1e-9 * scale);
    let sig = sigma(cfg, &q)?;
    let mut out = Output::new(Verdict::from_bool(psd));
    out.note("key", &q.key);
    out.note("dim", q.dim);
    out.table("gram", &entries)?;
    out.table(
        "eigenvalues",
        &eig.iter().enumerate().map(|(index, &value)| IndexedValue { index, value }).collect::<Vec<_>>(),
    )?;
    out.table(
        "observable",
        &sig.sigma.iter().enumerate().map(|(index, &value)| IndexedValue { index, value }).collect::<Vec<_>>(),
    )?;
    Ok(out)
}

fn ensemble(s: &Setup, q: &GramForm, cap: f64) -> Res<Ensemble> {
    info!(cap, "enumerating states");
    core(Ensemble::build(&s.graph, &s.cycles, &s.lattice, q, &s.hd, cap))
}

#[derive(Serialize)]
struct StateRow {
    beta: f64,
    coords: String,
    norm1: f64,
    energy_el: f64,
    energy_disl: f64,
    probability: f64,
}

#[derive(Serialize)]
struct PartitionRow {
    beta: f64,
    z: f64,
    tail_bound: f64,
}

#[derive(Serialize)]
struct FourierRow {
    beta: f64,
    t: f64,
    re: f64,
    im: f64,
    error: f64,
}

#[derive(Serialize)]
struct OccupancyRow {
    beta: f64,
    coords: String,
    exact: f64,
    frequency: f64,
    sigma: f64,
    holds: bool,
}

#[derive(Serialize)]
struct ChainRow {
    beta: f64,
    seed: u64,
    kept_steps: u64,
    acceptance_rate: f64,
    verdict: Verdict,
}

pub fn sample(cfg: &ExperimentConfig, s: &Setup, seed: u64) -> Res<Output> {
    let g = &cfg.gibbs;
    let q = gram(cfg, s)?;
    let sig = sigma(cfg, &q)?;
    let ens = ensemble(s, &q, g.norm_cap)?;
    let shown: Vec<_> = ens.states.iter().filter(|st| st.norm1 <= g.report_cap).cloned().collect();
    let mut partition = Vec::new();
    let mut fourier = Vec::new();
    for &beta in &g.betas {
        let pf = gibbs::partition_function(&ens, &s.lattice, beta);
        partition.push(PartitionRow { beta, z: pf.z, tail_bound: pf.tail_bound });
        for &t in &cfg.observable.ts {
            let f = core(gibbs::expectation_fourier(&ens, &s.lattice, &sig, t, beta))?;
            fourier.push(FourierRow { beta, t, re: f.value.re, im: f.value.im, error: f.error });
        }
    }
    match g.mode {
        SampleMode::Exact => {
            let mut rows = Vec::new();
            for (&beta, pf) in g.betas.iter().zip(&partition) {
                for st in &shown {
                    rows.push(StateRow {
                        beta,
                        coords: coords_label(&st.coords),
                        norm1: st.norm1,
                        energy_el: st.energy_el,
                        energy_disl: st.energy_disl,
                        probability: ens.weight(st, beta) / pf.z,
                    });
                }
            }
            let mut out = Output::new(Verdict::Pass);
            out.note("mode", "exact");
            out.note("states", ens.states.len());
            out.table("states", &rows)?;
            out.table("partition", &partition)?;
            out.table("fourier", &fourier)?;
            Ok(out)
        }
        SampleMode::Mcmc => {
            let mut rows = Vec::new();
            let mut chains = Vec::new();
            let mut verdict = Verdict::Pass;
            for (k, &beta) in g.betas.iter().enumerate() {
                let chain_seed = seed.wrapping_add(k as u64);
                let cc = ChainConfig {
                    beta,
                    steps: g.steps,
                    burn_in: g.burn_in,
                    seed: chain_seed,
                    batches: g.batches,
                    record_every: 0,
                };
                info!(beta, steps = g.steps, "running chain");
                let mut chain = core(gibbs::Chain::new(&s.graph, &s.cycles, &s.lattice, &q, &s.hd, beta))?;
                let res = core(chain.run(&cc))?;
                let rep = core(gibbs::occupancy_check(&mut chain, &res, &cc, &ens, &s.lattice, &shown, 3.0))?;
                verdict = verdict.combine(rep.verdict);
                chains.push(ChainRow {
                    beta,
                    seed: chain_seed,
                    kept_steps: rep.kept_steps,
                    acceptance_rate: rep.acceptance_rate,
                    verdict: rep.verdict,
                });
                rows.extend(rep.rows.into_iter().map(|r| OccupancyRow {
                    beta,
                    coords: coords_label(&r.coords),
                    exact: r.exact,
                    frequency: r.frequency,
                    sigma: r.sigma,
                    holds: r.holds,
                }));
            }
            let mut out = Output::new(verdict);
            out.note("mode", "mcmc");
            out.note("states", ens.states.len());
            out.table("occupancy", &rows)?;
            out.table("chains", &chains)?;
            out.table("partition", &partition)?;
            out.table("fourier", &fourier)?;
            Ok(out)
        }
    }
}

#[derive(Serialize)]
struct ZRow {
    beta: f64,
    current: String,
    size: Option<f64>,
    z: f64,
    z_plus: f64,
}

#[derive(Serialize)]
struct IdentityRow {
    beta: f64,
    phi: usize,
    log_brute: f64,
    series: f64,
    series_imag: f64,
    discrepancy: f64,
    bound: f64,
    verdict: Verdict,
}

#[derive(Serialize)]
struct PeierlsRow {
    beta: f64,
    c8: f64,
    c8_within_c10: bool,
    lhs: f64,
    tail: f64,
    lhs_k_exp_a: f64,
    rhs: f64,
    margin: f64,
    holds: bool,
}

#[derive(Serialize)]
struct KpRow {
    beta: f64,
    polymer: usize,
    support: usize,
    closure: usize,
    lhs: f64,
    tail: f64,
    a: f64,
    holds: bool,
}

#[derive(Serialize)]
struct ZPlusRow {
    beta: f64,
    anchor: usize,
    lhs_truncated: f64,
    chain_bound: f64,
    rhs: f64,
    holds: bool,
}

/// Test vectors φ = 0, ±(0.7k + 0.31·index) for k = 1..pairs.
fn identity_phis(dim: usize, pairs: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; dim]];
    for k in 1..=pairs {
        let phi: Vec<f64> = (0..dim).map(|i| 0.7 * k as f64 + 0.31 * i as f64).collect();
        out.push(phi.iter().map(|v| -v).collect());
        out.push(phi);
    }
    out
}

pub fn cluster_cmd(cfg: &ExperimentConfig, s: &Setup) -> Res<Output> {
    let c = &cfg.cluster;
    let mut verdict = Verdict::Pass;
    let mut zrows = Vec::new();
    let mut idrows = Vec::new();
    let mut exact_symmetry = true;
    for &beta in &c.betas {
        info!(beta, size_cap = c.size_cap, n_max = c.n_max, "cluster coefficients");
        let fam = core(PolymerFamily::new(&s.graph, &s.cycles, &s.lattice, &s.hd, c.size_cap, beta))?;
        let z = core(cluster::z_coefficients(&s.graph, &s.lattice, &fam, c.n_max))?;
        for e in &z.entries {
            exact_symmetry &= z.get(&e.current.scale(-1)).map(|m| m.z) == Some(e.z);
            zrows.push(ZRow { beta, current: current_label(&e.current, s), size: e.size, z: e.z, z_plus: e.z_plus });
        }
        if c.identity {
            let phis = identity_phis(3 * s.cycles.rank(), c.identity_pairs);
            let rep =
                core(cluster::partition_identity_check(&s.graph, &s.cycles, &s.lattice, &s.hd, &z, &phis, c.norm_cap))?;
            verdict = verdict.combine(rep.verdict);
            idrows.extend(rep.rows.iter().enumerate().map(|(k, r)| IdentityRow {
                beta,
                phi: k,
                log_brute: r.log_brute,
                series: r.series,
                series_imag: r.series_imag,
                discrepancy: r.discrepancy,
                bound: r.bound,
                verdict: r.verdict,
            }));
        }
    }
    verdict = verdict.combine(Verdict::from_bool(exact_symmetry));
    let mut out = Output::new(Verdict::Pass);
    out.note("z_symmetry_exact", exact_symmetry);
    out.table("z", &zrows)?;
    if c.identity {
        out.table("identity", &idrows)?;
    }
    if c.peierls {
        let ec = core(ExpansionConstants::new(s.hd.lower_bound(&s.graph, &s.lattice), s.lattice.eta()))?;
        let pc = PeierlsConstants::new(ec, c.lambda_degree);
        info!(size_cap = c.size_cap, "enumerating polymers for the Peierls bound");
        let polymers = core(currents::enumerate_polymers(&s.graph, &s.lattice, c.size_cap))?;
        let rep = cluster::peierls_check(&s.graph, &s.lattice, &pc, &polymers, c.size_cap, &c.peierls_betas);
        let above_ok =
            rep.threshold.map(|t| rep.rows.iter().filter(|r| r.beta >= t).all(|r| r.holds && r.margin > 0.0));
        verdict = verdict.combine(Verdict::from_bool(above_ok == Some(true)));
        out.note("peierls_threshold", rep.threshold);
        out.note("peierls_analytic_threshold", rep.analytic_threshold);
        out.note("peierls_c10", rep.constants.c10);
        out.note("peierls_c7", rep.constants.c7);
        let rows: Vec<PeierlsRow> = rep
            .rows
            .iter()
            .map(|r| PeierlsRow {
                beta: r.beta,
                c8: r.c8,
                c8_within_c10: r.c8_within_c10,
                lhs: r.lhs,
                tail: r.tail,
                lhs_k_exp_a: r.lhs_k_exp_a,
                rhs: r.rhs,
                margin: r.margin,
                holds: r.holds,
            })
            .collect();
        out.table("peierls", &rows)?;

        info!(beta = c.kp_beta, "Kotecký–Preiss condition");
        let kp = cluster::kp_condition_check(&s.graph, &s.lattice, &pc, &polymers, c.size_cap, c.kp_beta);
        verdict = verdict.combine(kp.verdict);
        out.note("kp_chain_holds", kp.chain_holds);
        let rows: Vec<KpRow> = kp
            .rows
            .iter()
            .map(|r| KpRow {
                beta: kp.beta,
                polymer: r.polymer,
                support: r.support,
                closure: r.closure,
                lhs: r.lhs,
                tail: r.tail,
                a: r.a,
                holds: r.holds,
            })
            .collect();
        out.table("kp", &rows)?;

        let fam = core(PolymerFamily::new(&s.graph, &s.cycles, &s.lattice, &s.hd, c.size_cap, c.kp_beta))?;
        let z = core(cluster::z_coefficients(&s.graph, &s.lattice, &fam, c.n_max))?;
        let zp = cluster::z_plus_bound_check(&s.graph, &s.lattice, &pc, &polymers, c.size_cap, &z, &kp);
        verdict = verdict.combine(zp.verdict);
        out.note("z_plus_total", zp.z_plus_total);
        out.note("z_plus_total_bound", zp.z_plus_total_bound);
        let rows: Vec<ZPlusRow> = zp
            .rows
            .iter()
            .map(|r| ZPlusRow {
                beta: zp.beta,
                anchor: r.anchor,
                lhs_truncated: r.lhs_truncated,
                chain_bound: r.chain_bound,
                rhs: r.rhs,
                holds: r.holds,
            })
            .collect();
        out.table("z_plus", &rows)?;
    }
    out.verdict = verdict;
    Ok(out)
}

#[derive(Serialize)]
struct GaussianRow {
    beta: f64,
    t: f64,
    lhs: f64,
    lhs_error: f64,
    rhs: f64,
    rhs_certified: f64,
    verdict: Verdict,
}

#[derive(Serialize)]
struct VarianceBoundRow {
    beta: f64,
    quadratic: f64,
    slack: f64,
    variance: f64,
    variance_error: f64,
    verdict: Verdict,
}

#[derive(Serialize)]
struct DecayRow {
    x: f64,
    y: f64,
    z: f64,
    distance: f64,
    far: bool,
    value: f64,
    bound: Option<f64>,
}

pub fn bound(cfg: &ExperimentConfig, s: &Setup) -> Res<Output> {
    let b = &cfg.bound;
    let q = gram(cfg, s)?;
    let sig = sigma(cfg, &q)?;
    let ens = ensemble(s, &q, b.norm_cap)?;
    let mut verdict = Verdict::Pass;
    let mut rows = Vec::new();
    let mut var_rows = Vec::new();
    for &beta in &b.betas {
        info!(beta, "Gaussian lower bound");
        let fam = core(PolymerFamily::new(&s.graph, &s.cycles, &s.lattice, &s.hd, b.size_cap, beta))?;
        let z = core(cluster::z_coefficients(&s.graph, &s.lattice, &fam, b.n_max))?;
        let rep =
            core(cluster::gaussian_lower_bound_check(&ens, &s.lattice, &s.cycles, &fam, &z, &sig, &cfg.observable.ts))?;
        verdict = verdict.combine(rep.verdict).combine(rep.variance_verdict);
        rows.extend(rep.rows.iter().map(|r| GaussianRow {
            beta,
            t: r.t,
            lhs: r.lhs,
            lhs_error: r.lhs_error,
            rhs: r.rhs,
            rhs_certified: r.rhs_certified,
            verdict: r.verdict,
        }));
        var_rows.push(VarianceBoundRow {
            beta,
            quadratic: rep.quadratic,
            slack: rep.slack,
            variance: rep.variance,
            variance_error: rep.variance_error,
            verdict: rep.variance_verdict,
        });
    }
    let i = &s.currents[0];
    info!(anchor = cfg.energy.anchor_edge, "observable decay bound");
    let ob = core(elastic::observable_bound_check(
        &s.graph,
        &s.lattice,
        i,
        cfg.energy.anchor_edge,
        &s.phi,
        &s.grid,
        &s.params,
        &cfg.energy.points,
    ))?;
    verdict = verdict.combine(Verdict::from_bool(ob.violations == 0));
    let decay: Vec<DecayRow> = ob
        .samples
        .iter()
        .map(|p| DecayRow {
            x: p.x[0],
            y: p.x[1],
            z: p.x[2],
            distance: p.distance,
            far: p.far,
            value: p.value,
            bound: p.bound,
        })
        .collect();
    let mut out = Output::new(verdict);
    out.note("observable_current", current_label(i, s));
    out.note("m1", ob.m1);
    out.note("c12", ob.c12);
    out.note("c13", ob.c13);
    out.note("c16", ob.c16);
    out.note("far_prefactor", ob.far_prefactor);
    out.note("decay_exponent", ob.decay_exponent);
    out.note("far_violations", ob.violations);
    out.table("gaussian", &rows)?;
    out.table("variance", &var_rows)?;
    out.table("decay", &decay)?;
    Ok(out)
}

#[derive(Serialize)]
struct RemainderRow {
    density: String,
    kernel: String,
    x: f64,
    y: f64,
    z: f64,
    norm: f64,
    remainder: f64,
    bound: f64,
    quad_error: f64,
    holds: bool,
}

#[derive(Serialize)]
struct UniformRow {
    grid_points: usize,
    points: usize,
    c18: f64,
    c19: f64,
    c18_radial: f64,
    max_quad_error: f64,
}

/// Relative change allowed in c18, c19 between the coarsest and finest grid.
const UNIFORM_STABILITY: f64 = 0.05;

pub fn dipole_cmd(cfg: &ExperimentConfig, s: &Setup) -> Res<Output> {
    let d = &cfg.dipole;
    let mut verdict = Verdict::Pass;
    let mut rows = Vec::new();
    let mut trace = Vec::new();
    for (name, center) in [("centred", [0.0; 3]), ("shifted", d.shift)] {
        let rho = core(ChargeDensity::bump(center, d.bump_radius, 1.0))?;
        let samples = dipole::far_samples(rho.r, d.samples);
        info!(density = name, samples = d.samples, "remainder bounds");
        let mut reps = core(dipole::dipole_remainder_check(&rho, &samples, true))?;
        let bih = core(dipole::biharmonic_kernel_check(&rho, &samples))?;
        verdict = verdict.combine(bih.verdict);
        trace.push((name, bih.trace_defect, bih.trace_error));
        reps.extend(bih.remainders);
        for rep in &reps {
            verdict = verdict.combine(rep.verdict);
            push_remainders(&mut rows, name, rep);
        }
    }
    let mut uniform = Vec::new();
    for &n in &d.uniform_grids {
        info!(grid_points = n, "uniform kernel bounds");
        let u = core(dipole::uniform_bounds_check(&s.phi, n))?;
        uniform.push(UniformRow {
            grid_points: u.grid_points,
            points: u.points,
            c18: u.c18,
            c19: u.c19,
            c18_radial: u.c18_radial,
            max_quad_error: u.max_quad_error,
        });
    }
    let (first, last) = (&uniform[0], &uniform[uniform.len() - 1]);
    let stable = (last.c18 - first.c18).abs() <= UNIFORM_STABILITY * last.c18
        && (last.c19 - first.c19).abs() <= UNIFORM_STABILITY * last.c19;
    verdict = verdict.combine(Verdict::from_bool(stable && last.c18.is_finite() && last.c19.is_finite()));
    let mut out = Output::new(verdict);
    for (name, defect, err) in trace {
        out.note(&format!("{name}_trace_defect"), defect);
        out.note(&format!("{name}_trace_error"), err);
    }
    out.note("uniform_stability", UNIFORM_STABILITY);
    out.table("remainders", &rows)?;
    out.table("uniform", &uniform)?;
    Ok(out)
}

fn push_remainders(rows: &mut Vec<RemainderRow>, density: &str, rep: &RemainderReport) {
    rows.extend(rep.rows.iter().map(|r| RemainderRow {
        density: density.to_string(),
        kernel: rep.name.clone(),
        x: r.x[0],
        y: r.x[1],
        z: r.x[2],
        norm: r.norm,
        remainder: r.remainder,
        bound: r.bound,
        quad_error: r.quad_error,
        holds: r.holds,
    }));
}

pub fn sweep_variance(cfg: &ExperimentConfig, s: &Setup) -> Res<Output> {
    let q = gram(cfg, s)?;
    let sig = sigma(cfg, &q)?;
    let ens = ensemble(s, &q, cfg.sweep.norm_cap)?;
    let sweep = core(gibbs::variance_sweep(&ens, &s.lattice, &sig, &cfg.sweep.betas))?;
    info!(gap = sweep.gap, c2 = sweep.c2, "variance sweep");
    let mut out = Output::new(sweep.verdict);
    out.note("gap", sweep.gap);
    out.note("c2", sweep.c2);
    out.note("min_excitation", sweep.min_excitation);
    out.note("monotone", sweep.monotone);
    out.table("variance", &sweep.rows)?;
    Ok(out)
}
