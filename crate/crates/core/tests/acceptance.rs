//! Acceptance battery AC1–AC11. Each criterion prints one PASS/FAIL line.
//!
//! Run with `cargo test --release -p parafio --test acceptance -- --nocapture`.

use std::sync::OnceLock;

use parafio::dyadic::{AngularPatchFamily, LittlewoodPaleyFamily, SecondFrequencyFamily};
use parafio::fio::*;
use parafio::grid::*;
use parafio::kernel::*;
use parafio::parametrix::*;
use parafio::phase::PhaseField;
use parafio::{rng, spectral, Complex64, Vector3, FLAT_PLANCHEREL};
use rand::Rng;

fn verdict(id: &str, pass: bool, detail: String) {
    println!("{id} {}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{id} failed: {detail}");
}

fn sci(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(", ")
}

fn relative(a: &SpatialField, b: &SpatialField, g: &SpatialGrid) -> f64 {
    spatial_l2_norm(&a.sub(b), g).unwrap() / spatial_l2_norm(b, g).unwrap()
}

/// Grid that resolves the whole box at every frequency on it.
fn resolved_grid() -> (PolarFrequencyGrid, SpatialGrid) {
    (PolarFrequencyGrid::build(-4, 1, 8, 1024).unwrap(), SpatialGrid::lattice(3.0, 12).unwrap())
}

fn operator(phase: PhaseField, symbol: SymbolField, grids: &(PolarFrequencyGrid, SpatialGrid), delta: f64) -> FioOperator {
    FioOperator::new(phase, symbol, grids.0.clone(), grids.1.clone(), delta, 0.125).unwrap()
}

fn sample_density(fgrid: &PolarFrequencyGrid, seed: u64) -> HalfDensity {
    DensityEnsemble::for_grid(fgrid).draw(fgrid, seed, 0, 1).remove(0)
}

#[test]
fn ac01_partition_of_unity() {
    let mut r = rng::stream(2024, 1);
    let lp = LittlewoodPaleyFamily::with_range(-3, 6).unwrap();
    let lp_err = (0..10_000)
        .map(|_| {
            let l = r.random_range(0.0..2f64.powi(6));
            (lp.indices().map(|j| lp.weight(j, l)).sum::<f64>() - 1.0).abs()
        })
        .fold(0.0, f64::max);
    let fam = AngularPatchFamily::build(4, 0.5).unwrap();
    let ang_err = (0..10_000)
        .map(|_| {
            let w = loop {
                let p = Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
                let n = p.norm();
                if n > 0.1 && n <= 1.0 {
                    break p / n;
                }
            };
            (fam.eval_all(&w).iter().map(|e| e.1).sum::<f64>() - 1.0).abs()
        })
        .fold(0.0, f64::max);
    let split = SecondFrequencyFamily::build(3, 0.125, 2f64.powi(-17)).unwrap();
    let (a, b) = split.octave();
    let split_err = (0..10_000)
        .map(|_| {
            let l = r.random_range(a..=b);
            ((0..split.len()).map(|k| split.eval(k, l)).sum::<f64>() - 1.0).abs()
        })
        .fold(0.0, f64::max);
    let worst = lp_err.max(ang_err).max(split_err);
    verdict(
        "AC1",
        worst <= 1e-10 && split.len() > 2,
        format!("max deviation: octaves {lp_err:.1e}, patches {ang_err:.1e}, intervals {split_err:.1e} (tol 1e-10)"),
    );
}

#[test]
fn ac02_decomposition_consistency() {
    let grids = (PolarFrequencyGrid::build(-1, 1, 8, 256).unwrap(), SpatialGrid::lattice(2.0, 8).unwrap());
    let op = operator(PhaseField::standard(0.05).unwrap(), SymbolField::LapseInverse, &grids, 0.5);
    let f = sample_density(&grids.0, 5);
    let sg = &grids.1;
    let full = op.apply(&f).unwrap();
    let sum = |fields: Vec<SpatialField>| {
        let mut total = SpatialField::zeros(sg.len());
        for x in &fields {
            total.axpy(Complex64::new(1.0, 0.0), x);
        }
        total
    };
    let octaves: Vec<SpatialField> = std::iter::once(op.lp.low_index())
        .chain(op.bands())
        .map(|j| op.apply_piece(&f, &Piece::octave(j)).unwrap())
        .collect();
    let err_j = relative(&sum(octaves), &full, sg);
    let mut err_nu: f64 = 0.0;
    for j in op.bands() {
        let n = op.angular_family(j).unwrap().len();
        let patches = (0..n).map(|nu| op.apply_piece(&f, &Piece::patch(j, nu)).unwrap()).collect();
        err_nu = err_nu.max(relative(&sum(patches), &op.apply_piece(&f, &Piece::octave(j)).unwrap(), sg));
    }
    let sep = 2f64.powi(-17);
    let mut err_k: f64 = 0.0;
    let j = 1;
    for nu in [0, 3, 7] {
        let count = SecondFrequencyFamily::build(j, op.alpha, sep).unwrap().len();
        let parts = (0..count).map(|k| op.apply_piece(&f, &Piece::refined(j, nu, sep, k)).unwrap()).collect();
        err_k = err_k.max(relative(&sum(parts), &op.apply_piece(&f, &Piece::patch(j, nu)).unwrap(), sg));
    }
    let by_pieces = relative(&op.apply_by_pieces(&f).unwrap(), &full, sg);
    let worst = err_j.max(err_nu).max(err_k).max(by_pieces);
    verdict(
        "AC2",
        worst <= 1e-8,
        format!("relative error: j {err_j:.1e}, nu {err_nu:.1e}, k {err_k:.1e}, parallel {by_pieces:.1e} (tol 1e-8)"),
    );
}

#[test]
fn ac03_flat_fourier_identity() {
    let grids = resolved_grid();
    let op = operator(PhaseField::flat(), SymbolField::Unit, &grids, 0.5);
    let g = HalfDensity::from_fn(&grids.0, |l, _| Complex64::new((-0.5 * l * l).exp(), 0.0));
    let image = op.apply(&g).unwrap();
    let exact = SpatialField::from_fn(&grids.1, |x| Complex64::new(FLAT_PLANCHEREL * (-0.5 * x.norm_squared()).exp(), 0.0));
    let err = relative(&image, &exact, &grids.1);
    let base = baseline(&grids.0, &grids.1).unwrap();
    let est = operator_norm(&op, 2, 8, 17).unwrap();
    let q = est.value / base;
    verdict(
        "AC3",
        err <= 1e-3 && (q - 1.0).abs() <= 0.01 && est.converged,
        format!("Gaussian error {err:.2e} (tol 1e-3); operator_norm/baseline {q:.4} (tol 1%), converged {}", est.converged),
    );
}

#[test]
fn ac04_frequency_almost_orthogonality() {
    let grids = (PolarFrequencyGrid::build(-4, 1, 8, 2048).unwrap(), SpatialGrid::lattice(4.0, 16).unwrap());
    let op = operator(PhaseField::standard(0.05).unwrap(), SymbolField::Unit, &grids, 0.5);
    let f = sample_density(&grids.0, 11);
    let mut constants = Vec::new();
    let mut below = true;
    for (lo, hi) in [(-4, 0), (-3, 1)] {
        let tab = orthogonality_scan(&op, &f, ScanMode::Frequency { j_lo: lo, j_hi: hi }).unwrap();
        below &= !tab.rows.is_empty() && tab.rows.iter().all(|r| r.measured <= tab.fitted_c * r.envelope * (1.0 + 1e-12));
        constants.push(tab.fitted_c);
    }
    let stability = constants[0].max(constants[1]) / constants[0].min(constants[1]);
    verdict(
        "AC4",
        below && stability <= 2.0,
        format!("fitted C per window {:.3} / {:.3}, ratio {stability:.3} (tol 2)", constants[0], constants[1]),
    );
}

#[test]
fn ac05_angular_almost_orthogonality() {
    let grids = (PolarFrequencyGrid::build(-4, 1, 8, 2048).unwrap(), SpatialGrid::lattice(4.0, 16).unwrap());
    let op = operator(PhaseField::standard(0.05).unwrap(), SymbolField::Unit, &grids, 0.25);
    let f = sample_density(&grids.0, 11);
    let tab = orthogonality_scan(&op, &f, ScanMode::Angle { j: 1 }).unwrap();
    let monotone = tab.medians.windows(2).all(|w| w[1].1 < w[0].1);
    let below = tab.rows.iter().all(|r| r.measured <= tab.fitted_c * r.envelope * (1.0 + 1e-12));
    let medians: Vec<String> = tab.medians.iter().map(|(s, m)| format!("{s:.2}:{m:.2e}")).collect();
    verdict(
        "AC5",
        monotone && below && tab.medians.len() >= 3,
        format!("{} pairs, medians by separation [{}], fitted C {:.3}", tab.rows.len(), medians.join(", "), tab.fitted_c),
    );
}

#[test]
fn ac06_diagonal_bound() {
    let grids = resolved_grid();
    let op = operator(PhaseField::standard(0.05).unwrap(), SymbolField::Unit, &grids, 0.5);
    let f = sample_density(&grids.0, 5);
    let base = baseline(&grids.0, &grids.1).unwrap();
    let rows = diagonal_sweep(&op, &f, &op.bands()).unwrap();
    let max = rows.iter().filter(|r| !r.2.skipped).map(|r| r.2.ratio).fold(0.0, f64::max);
    let q = max / base;
    verdict("AC6", (0.5..=2.0).contains(&q), format!("max ‖U_j^ν f‖/γ_j^ν over baseline = {q:.4} (range [0.5, 2])"));
}

#[test]
fn ac07_kernel_decay() {
    let phase = PhaseField::standard(0.05).unwrap();
    let x = Vector3::new(0.1, -0.2, 0.15);
    let mut sups = Vec::new();
    let mut rows = Vec::new();
    for j in [4, 5, 6] {
        let fam = AngularPatchFamily::build(j, 0.5).unwrap();
        let probe = KernelProbe::sample(&fam, 0, 7, &ProbeOptions::default()).unwrap();
        sups.push(decay_ratio_scan(&probe, &phase, &fam).unwrap().sup_ratio);
        let g = SchurBox::default().grid(&x, &fam.centers()[0], j, 0.5).unwrap();
        rows.push(schur_row_sum(&phase, &fam, 0, &x, &g).unwrap().normalized);
    }
    let spread = |v: &[f64]| v.iter().copied().fold(0.0, f64::max) / v.iter().copied().fold(f64::INFINITY, f64::min);
    let (s1, s2) = (spread(&sups), spread(&rows));
    verdict(
        "AC7",
        s1 < 4.0 && s2 < 2.0,
        format!("sup ratio [{}] spread {s1:.3} (tol 4); normalized row sums {rows:.4?} spread {s2:.3} (tol 2)", sci(&sups)),
    );
}

#[test]
fn ac08_symbol_smallness_scaling() {
    let grids = resolved_grid();
    let norms: Vec<f64> = [0.01, 0.02, 0.04]
        .iter()
        .map(|&eps| {
            let op = operator(PhaseField::standard(eps).unwrap(), SymbolField::LapseInverseMinusOne, &grids, 0.5);
            operator_norm(&op, 2, 8, 3).unwrap().value
        })
        .collect();
    let ratios = [norms[1] / norms[0], norms[2] / norms[1]];
    verdict(
        "AC8",
        ratios.iter().all(|r| (1.6..=2.4).contains(r)),
        format!("norms [{}], successive ratios {ratios:.3?} (range [1.6, 2.4])", sci(&norms)),
    );
}

#[test]
fn ac09_lower_bound() {
    let grids = resolved_grid();
    let base = baseline(&grids.0, &grids.1).unwrap();
    let phase = PhaseField::standard(0.01).unwrap();
    let op = operator(phase.clone(), SymbolField::Unit, &grids, 0.25);
    let lb = lower_bound_ratio(&op, &DensityEnsemble::for_grid(&grids.0), 8, 9, base).unwrap();
    let f = sample_density(&grids.0, 5);
    let gap = |delta: f64| {
        let op = operator(phase.clone(), SymbolField::Unit, &grids, delta);
        let fam = op.angular_family(1).unwrap();
        let nu = (0..fam.len())
            .min_by(|a, b| (fam.centers()[*a] - Vector3::z()).norm().total_cmp(&(fam.centers()[*b] - Vector3::z()).norm()))
            .unwrap();
        flat_comparison_gap(&op, 1, nu, &f).unwrap().ratio
    };
    let (g1, g2) = (gap(0.25), gap(0.125));
    verdict(
        "AC9",
        lb.ratio >= 0.5 && lb.hypothesis_ok && g2 < g1,
        format!("min ‖Uf‖/(baseline‖f‖) {:.4} (tol 0.5); gap/γ at δ=1/4 {g1:.3e}, δ=1/8 {g2:.3e}", lb.ratio),
    );
}

struct FlatSolve {
    fgrid: PolarFrequencyGrid,
    sgrid: SpatialGrid,
    data: InitialData,
    result: SolveResult,
}

/// Flat Gaussian-data solve shared by AC10 and AC11.
fn flat_solve() -> &'static FlatSolve {
    static CELL: OnceLock<FlatSolve> = OnceLock::new();
    CELL.get_or_init(|| {
        let fgrid = PolarFrequencyGrid::build(-4, 2, 8, 2048).unwrap();
        let sgrid = SpatialGrid::lattice(3.0, 16).unwrap();
        let data = InitialData::gaussian(&sgrid, 0.7, 1.0, 1.0).unwrap();
        let sys = assemble_system(&PhaseField::flat(), &fgrid, &sgrid, default_mu(), SystemEngine::default()).unwrap();
        let result = solve_data(&sys, &data, 1e-6, 400).unwrap();
        FlatSolve { fgrid, sgrid, data, result }
    })
}

#[test]
fn ac10_data_solve() {
    let fs = flat_solve();
    let err = fs.result.pair.relative_error(&closed_form(&fs.data, &fs.fgrid, &fs.sgrid), &fs.fgrid).unwrap();
    let flat_ok = err <= 1e-3 && fs.result.converged;
    println!("AC10 flat: closed-form error {err:.2e} (tol 1e-3), residual {:.1e}", fs.result.residual);

    let fgrid = PolarFrequencyGrid::build(-4, 2, 8, 512).unwrap();
    let sgrid = SpatialGrid::lattice(3.0, 12).unwrap();
    let data: Vec<InitialData> =
        (0..20).map(|i| InitialData::random(&sgrid, &RandomData::default(), 42, i).unwrap()).collect();
    let refs: Vec<&InitialData> = data.iter().collect();
    let sys =
        assemble_system(&PhaseField::standard(0.05).unwrap(), &fgrid, &sgrid, default_mu(), SystemEngine::default())
            .unwrap();
    let results = solve_batch(&sys, &refs, 1e-6, 200, None).unwrap();
    let worst_residual = results.iter().map(|r| r.residual).fold(0.0, f64::max);
    let worst_q = data
        .iter()
        .zip(&results)
        .map(|(d, r)| {
            estimate_ratio(&r.pair, d, &fgrid, &sgrid).unwrap() / flat_baseline_ratio(d, &fgrid, &sgrid).unwrap()
        })
        .fold(0.0, f64::max);
    let pert_ok = worst_residual <= 1e-6 && worst_q <= 2.0;
    verdict(
        "AC10",
        flat_ok && pert_ok,
        format!(
            "flat closed-form error {err:.2e} (tol 1e-3); perturbed max residual after 200 iterations {worst_residual:.2e} (tol 1e-6), \
             max estimate ratio over flat {worst_q:.3} (tol 2)"
        ),
    );
}

#[test]
fn ac11_flat_evolution() {
    let fs = flat_solve();
    let lat = fs.sgrid.lattice_info().unwrap();
    let fields = evolve_flat_times(&PhaseField::flat(), &fs.result.pair, &[0.0, 0.5], &fs.fgrid, &fs.sgrid).unwrap();
    let oracle = SpatialField { values: spectral::wave_evolve(&fs.data.phi0.values, &fs.data.phi1.values, lat, 0.5) };
    let err_t = relative(&fields[1], &oracle, &fs.sgrid);
    let err_0 = relative(&fields[0], &fs.data.phi0, &fs.sgrid);
    verdict(
        "AC11",
        err_t <= 1e-3 && err_0 <= 1e-3,
        format!("t=0.5 error vs spectral {err_t:.2e} (tol 1e-3); t=0 trace error {err_0:.2e} (tol 1e-3)"),
    );
}
