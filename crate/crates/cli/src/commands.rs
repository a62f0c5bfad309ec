use anyhow::{anyhow, bail, Result};
use parafio::dyadic::AngularPatchFamily;
use parafio::fio::{
    baseline, diagonal_sweep, lower_bound_ratio, operator_norm, orthogonality_scan, DensityEnsemble, FioOperator,
    ScanMode, SymbolField,
};
use parafio::grid::{spatial_l2_norm, PolarFrequencyGrid, SpatialField, SpatialGrid};
use parafio::kernel::{decay_ratio_scan, flat_comparison_gap, schur_row_sum, KernelProbe, ProbeOptions, SchurBox};
use parafio::parametrix::{
    assemble_system, closed_form, estimate_ratio, evolve_flat_times, flat_baseline_ratio, solve_batch, InitialData,
    SolveResult,
};
use parafio::phase::{check_assumptions, Bound, CheckOptions, PhaseField};
use parafio::{rng, spectral, Vector3};
use serde_json::{json, Map, Value};

use crate::config::ExperimentConfig;

/// CSV table plus summary metrics of one command.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub metrics: Map<String, Value>,
    pub pass: bool,
}

impl Report {
    fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new(), metrics: Map::new(), pass: true }
    }
    fn row(&mut self, cells: Vec<String>) {
        self.rows.push(cells);
    }
    fn metric(&mut self, key: &str, v: impl Into<Value>) {
        self.metrics.insert(key.into(), v.into());
    }
}

macro_rules! cells {
    ($($v:expr),* $(,)?) => { vec![$($v.to_string()),*] };
}

/// Purpose-specific seeds derived from the run seed.
#[derive(Debug, Clone, Copy)]
enum Stream {
    Densities = 1,
    Power = 2,
    Probe = 3,
    Data = 4,
    LowerBound = 5,
}

fn subseed(seed: u64, s: Stream) -> u64 {
    rng::derive_seed(seed, s as u64)
}

struct Setup {
    fgrid: PolarFrequencyGrid,
    sgrid: SpatialGrid,
    phase: PhaseField,
}

fn setup(cfg: &ExperimentConfig) -> Result<Setup> {
    let (fgrid, sgrid) = cfg.grids()?;
    Ok(Setup { fgrid, sgrid, phase: cfg.phase()? })
}

fn operator(cfg: &ExperimentConfig, s: &Setup, symbol: SymbolField, delta: f64) -> Result<FioOperator> {
    Ok(FioOperator::new(s.phase.clone(), symbol, s.fgrid.clone(), s.sgrid.clone(), delta, cfg.dyadic.alpha)?)
}

pub fn run(cfg: &ExperimentConfig) -> Result<Report> {
    match cfg.command.as_str() {
        "check-assumptions" => cmd_check(cfg),
        "norm" => cmd_norm(cfg),
        "ortho-freq" => cmd_ortho_freq(cfg),
        "ortho-angle" => cmd_ortho_angle(cfg),
        "diag" => cmd_diag(cfg),
        "kernel-decay" => cmd_kernel_decay(cfg),
        "schur" => cmd_schur(cfg),
        "compare-sjnu" => cmd_compare(cfg),
        "solve" => cmd_solve(cfg),
        "flat-roundtrip" => cmd_roundtrip(cfg),
        "evolve-flat" => cmd_evolve(cfg),
        other => bail!("command '{other}' cannot run directly"),
    }
}

/// At ε = 0 every item must meet its bound. At ε > 0 the ε-bounded items are
/// judged by first-order scaling: rerun at ε/2, the measurement must halve
/// within 20%; measured/ε is reported as the implied constant.
fn cmd_check(cfg: &ExperimentConfig) -> Result<Report> {
    let s = setup(cfg)?;
    let eps = cfg.phase.epsilon;
    let opts = CheckOptions { slack: cfg.params.slack, directions: cfg.params.directions };
    let report = check_assumptions(&s.phase, &s.fgrid, &s.sgrid, eps, opts);
    let halved = (eps > 0.0)
        .then(|| check_assumptions(&s.phase.with_epsilon(eps / 2.0), &s.fgrid, &s.sgrid, eps / 2.0, opts));
    let mut r = Report::new(&["assumption", "label", "norm", "measured", "bound", "constant", "halving_ratio", "pass"]);
    let mut failed = Vec::new();
    for (k, i) in report.items.iter().enumerate() {
        let (constant, ratio, pass) = match (&halved, &i.bound) {
            (Some(h), Bound::Epsilon) => {
                let ratio = h.items[k].measured / i.measured;
                (i.measured / eps, ratio, (ratio - 0.5).abs() <= 0.1)
            }
            _ => (f64::NAN, f64::NAN, i.pass),
        };
        if !pass {
            failed.push(i.label.clone());
        }
        r.row(cells![i.assumption, i.label, i.norm, i.measured, serde_json::to_string(&i.bound)?, constant, ratio, pass]);
    }
    r.pass = failed.is_empty();
    r.metric("failed", failed);
    Ok(r)
}

fn cmd_norm(cfg: &ExperimentConfig) -> Result<Report> {
    let s = setup(cfg)?;
    let op = operator(cfg, &s, cfg.symbol(), cfg.dyadic.delta)?;
    let base = baseline(&s.fgrid, &s.sgrid)?;
    let est = operator_norm(&op, cfg.params.ensemble_size, cfg.params.power_iters, subseed(cfg.seed, Stream::Power))?;
    let ratio = est.value / base;
    let mut r = Report::new(&["quantity", "value"]);
    r.row(cells!["operator_norm", est.value]);
    r.row(cells!["baseline", base]);
    r.row(cells!["ratio", ratio]);
    r.metric("operator_norm", est.value);
    r.metric("baseline", base);
    r.metric("ratio", ratio);
    r.metric("converged", est.converged);
    r.metric("iterations", est.iterations);
    r.pass = est.converged && ratio <= cfg.params.norm_bound;
    Ok(r)
}

fn probe_density(cfg: &ExperimentConfig, s: &Setup) -> parafio::grid::HalfDensity {
    DensityEnsemble::for_grid(&s.fgrid).draw(&s.fgrid, subseed(cfg.seed, Stream::Densities), 0, 1).remove(0)
}

fn cmd_ortho_freq(cfg: &ExperimentConfig) -> Result<Report> {
    let s = setup(cfg)?;
    let op = operator(cfg, &s, cfg.symbol(), cfg.dyadic.delta)?;
    let f = probe_density(cfg, &s);
    let mut r = Report::new(&["window_lo", "window_hi", "j", "k", "separation", "measured", "envelope", "ratio"]);
    let mut constants = Vec::new();
    for [lo, hi] in &cfg.params.windows {
        let tab = orthogonality_scan(&op, &f, ScanMode::Frequency { j_lo: *lo, j_hi: *hi })?;
        for row in &tab.rows {
            r.row(cells![lo, hi, row.a, row.b, row.separation, row.measured, row.envelope, row.ratio]);
        }
        constants.push(tab.fitted_c);
    }
    let lo = constants.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = constants.iter().copied().fold(0.0, f64::max);
    let stability = hi / lo;
    r.metric("fitted_c", constants.clone());
    r.metric("c_stability", stability);
    r.pass = lo > 0.0 && hi.is_finite() && stability <= 2.0;
    Ok(r)
}

fn cmd_ortho_angle(cfg: &ExperimentConfig) -> Result<Report> {
    let s = setup(cfg)?;
    let op = operator(cfg, &s, cfg.symbol(), cfg.dyadic.delta)?;
    let f = probe_density(cfg, &s);
    let j = cfg.params.angle_octave.unwrap_or(cfg.dyadic.j_max);
    let tab = orthogonality_scan(&op, &f, ScanMode::Angle { j })?;
    let mut r = Report::new(&["nu", "nu_prime", "separation", "measured", "envelope", "ratio"]);
    for row in &tab.rows {
        r.row(cells![row.a, row.b, row.separation, row.measured, row.envelope, row.ratio]);
    }
    let monotone = tab.medians.windows(2).all(|w| w[1].1 < w[0].1);
    let below = tab.rows.iter().all(|row| row.measured <= tab.fitted_c * row.envelope * (1.0 + 1e-12));
    r.metric("fitted_c", tab.fitted_c);
    r.metric("medians", tab.medians.iter().map(|(s, m)| json!([s, m])).collect::<Vec<_>>());
    r.metric("monotone", monotone);
    r.metric("skipped", tab.skipped);
    r.pass = monotone && below && tab.medians.len() >= 2;
    Ok(r)
}

fn cmd_diag(cfg: &ExperimentConfig) -> Result<Report> {
    let s = setup(cfg)?;
    let op = operator(cfg, &s, cfg.symbol(), cfg.dyadic.delta)?;
    let f = probe_density(cfg, &s);
    let base = baseline(&s.fgrid, &s.sgrid)?;
    let rows = diagonal_sweep(&op, &f, &op.bands())?;
    let mut r = Report::new(&["j", "nu", "norm", "gamma", "ratio", "skipped"]);
    for (j, nu, d) in &rows {
        r.row(cells![j, nu, d.norm, d.gamma, d.ratio, d.skipped]);
    }
    let max = rows.iter().filter(|x| !x.2.skipped).map(|x| x.2.ratio).fold(0.0, f64::max);
    let q = max / base;
    r.metric("max_ratio", max);
    r.metric("baseline", base);
    r.metric("max_over_baseline", q);
    r.pass = (0.5..=2.0).contains(&q);
    Ok(r)
}

fn spread(values: &[f64]) -> f64 {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(0.0, f64::max);
    hi / lo
}

fn cmd_kernel_decay(cfg: &ExperimentConfig) -> Result<Report> {
    let phase = cfg.phase()?;
    let opts = ProbeOptions {
        pairs_per_shell: cfg.params.pairs_per_shell,
        max_distance: cfg.params.max_distance,
        ..ProbeOptions::default()
    };
    let mut r = Report::new(&["j", "nu", "x", "y", "arg_a", "arg_b", "kernel_abs", "envelope", "ratio"]);
    let mut sups = Vec::new();
    for &j in &cfg.params.octaves {
        let fam = AngularPatchFamily::build(j, cfg.dyadic.delta)?;
        let probe = KernelProbe::sample(&fam, cfg.params.nu, subseed(cfg.seed, Stream::Probe), &opts)?;
        let scan = decay_ratio_scan(&probe, &phase, &fam)?;
        for row in &scan.rows {
            let p = |v: [f64; 3]| format!("{} {} {}", v[0], v[1], v[2]);
            r.row(cells![j, scan.nu, p(row.x), p(row.y), row.arg_a, row.arg_b, row.kernel_abs, row.envelope, row.ratio]);
        }
        sups.push(scan.sup_ratio);
    }
    let sp = spread(&sups);
    r.metric("sup_ratio", sups);
    r.metric("spread", sp);
    r.pass = sp < 4.0;
    Ok(r)
}

fn cmd_schur(cfg: &ExperimentConfig) -> Result<Report> {
    let phase = cfg.phase()?;
    let x = Vector3::from(cfg.params.anchor);
    let mut r = Report::new(&["j", "nu", "raw", "flat", "normalized"]);
    let mut norm = Vec::new();
    for &j in &cfg.params.octaves {
        let fam = AngularPatchFamily::build(j, cfg.dyadic.delta)?;
        let nu = cfg.params.nu;
        let center = *fam.centers().get(nu).ok_or_else(|| anyhow!("patch {nu} does not exist at octave {j}"))?;
        let g = SchurBox::default().grid(&x, &center, j, cfg.dyadic.delta)?;
        let rs = schur_row_sum(&phase, &fam, nu, &x, &g)?;
        r.row(cells![j, nu, rs.raw, rs.flat, rs.normalized]);
        norm.push(rs.normalized);
    }
    let sp = spread(&norm);
    r.metric("normalized", norm);
    r.metric("spread", sp);
    r.pass = sp < 2.0;
    Ok(r)
}

/// Patch whose center is closest to the north pole.
fn polar_patch(op: &FioOperator, j: i32) -> Result<usize> {
    let fam = op.angular_family(j).ok_or_else(|| anyhow!("octave {j} is not on the grid"))?;
    let z = Vector3::z();
    Ok((0..fam.len())
        .min_by(|a, b| (fam.centers()[*a] - z).norm().total_cmp(&(fam.centers()[*b] - z).norm()))
        .expect("nonempty family"))
}

fn cmd_compare(cfg: &ExperimentConfig) -> Result<Report> {
    let s = setup(cfg)?;
    let f = probe_density(cfg, &s);
    let j = cfg.dyadic.j_max;
    let mut r = Report::new(&["delta", "j", "nu", "gap", "gamma", "ratio", "degenerate_points"]);
    let mut ratios = Vec::new();
    for delta in [cfg.dyadic.delta, 0.5 * cfg.dyadic.delta] {
        let op = operator(cfg, &s, SymbolField::Unit, delta)?;
        let nu = polar_patch(&op, j)?;
        let g = flat_comparison_gap(&op, j, nu, &f)?;
        r.row(cells![delta, j, nu, g.gap, g.gamma, g.ratio, g.degenerate_points]);
        ratios.push(g.ratio);
    }
    let unit = operator(cfg, &s, SymbolField::Unit, cfg.dyadic.delta)?;
    let base = baseline(&s.fgrid, &s.sgrid)?;
    let lb = lower_bound_ratio(
        &unit,
        &DensityEnsemble::for_grid(&s.fgrid),
        cfg.params.lower_bound_size,
        subseed(cfg.seed, Stream::LowerBound),
        base,
    )?;
    let decreases = ratios[1] < ratios[0];
    r.metric("gap_ratio", ratios);
    r.metric("gap_decreases", decreases);
    r.metric("lower_bound", lb.ratio);
    r.metric("hypothesis_ok", lb.hypothesis_ok);
    r.pass = decreases && lb.ratio >= 0.5;
    Ok(r)
}

fn draw_data(cfg: &ExperimentConfig, sgrid: &SpatialGrid) -> Result<Vec<InitialData>> {
    let seed = subseed(cfg.seed, Stream::Data);
    let preset = cfg.params.data.preset();
    (0..cfg.params.samples.max(1) as u64).map(|i| Ok(InitialData::from_preset(sgrid, &preset, seed, i)?)).collect()
}

fn solve_all(cfg: &ExperimentConfig, s: &Setup, phase: &PhaseField, data: &[InitialData]) -> Result<Vec<SolveResult>> {
    let sys = assemble_system(phase, &s.fgrid, &s.sgrid, cfg.mu(), cfg.engine())?;
    let refs: Vec<&InitialData> = data.iter().collect();
    Ok(solve_batch(&sys, &refs, cfg.params.tol, cfg.params.max_iter, None)?)
}

fn cmd_solve(cfg: &ExperimentConfig) -> Result<Report> {
    let s = setup(cfg)?;
    let data = draw_data(cfg, &s.sgrid)?;
    let results = solve_all(cfg, &s, &s.phase, &data)?;
    let mut r = Report::new(&["sample", "iterations", "residual", "misfit", "estimate_ratio", "flat_ratio", "quotient"]);
    let mut worst: f64 = 0.0;
    let mut converged = true;
    for (i, (d, res)) in data.iter().zip(&results).enumerate() {
        let ratio = estimate_ratio(&res.pair, d, &s.fgrid, &s.sgrid)?;
        let flat = flat_baseline_ratio(d, &s.fgrid, &s.sgrid)?;
        worst = worst.max(ratio / flat);
        converged &= res.converged;
        r.row(cells![i, res.iterations, res.residual, res.misfit, ratio, flat, ratio / flat]);
    }
    r.metric("converged", converged);
    r.metric("max_quotient", worst);
    r.metric("max_residual", results.iter().map(|x| x.residual).fold(0.0, f64::max));
    r.pass = converged && worst <= 2.0;
    Ok(r)
}

fn relative(a: &SpatialField, b: &SpatialField, g: &SpatialGrid) -> Result<f64> {
    Ok(spatial_l2_norm(&a.sub(b), g)? / spatial_l2_norm(b, g)?)
}

fn cmd_roundtrip(cfg: &ExperimentConfig) -> Result<Report> {
    let s = setup(cfg)?;
    let data = draw_data(cfg, &s.sgrid)?;
    let flat = PhaseField::flat();
    let results = solve_all(cfg, &s, &flat, &data)?;
    let mut r = Report::new(&["sample", "iterations", "residual", "relative_error"]);
    let mut worst: f64 = 0.0;
    let mut converged = true;
    for (i, (d, res)) in data.iter().zip(&results).enumerate() {
        let err = res.pair.relative_error(&closed_form(d, &s.fgrid, &s.sgrid), &s.fgrid)?;
        worst = worst.max(err);
        converged &= res.converged;
        r.row(cells![i, res.iterations, res.residual, err]);
    }
    r.metric("relative_error", worst);
    r.metric("converged", converged);
    r.pass = converged && worst <= cfg.params.tolerance;
    Ok(r)
}

fn cmd_evolve(cfg: &ExperimentConfig) -> Result<Report> {
    let s = setup(cfg)?;
    let lat = s.sgrid.lattice_info().ok_or_else(|| anyhow!("evolve-flat needs a lattice"))?;
    let data = draw_data(cfg, &s.sgrid)?;
    let flat = PhaseField::flat();
    let results = solve_all(cfg, &s, &flat, &data)?;
    let mut r = Report::new(&["sample", "t", "relative_error"]);
    let mut worst: f64 = 0.0;
    for (i, (d, res)) in data.iter().zip(&results).enumerate() {
        let fields = evolve_flat_times(&flat, &res.pair, &cfg.params.times, &s.fgrid, &s.sgrid)?;
        for (t, field) in cfg.params.times.iter().zip(&fields) {
            let oracle = SpatialField { values: spectral::wave_evolve(&d.phi0.values, &d.phi1.values, lat, *t) };
            let err = relative(field, &oracle, &s.sgrid)?;
            worst = worst.max(err);
            r.row(cells![i, t, err]);
        }
    }
    r.metric("max_relative_error", worst);
    r.metric("converged", results.iter().all(|x| x.converged));
    r.pass = worst <= cfg.params.tolerance;
    Ok(r)
}
