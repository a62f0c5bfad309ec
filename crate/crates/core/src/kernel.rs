//! Kernel of U_j^ν (U_j^ν)*:
//!   K(x,y) = ∫ e^{iλ(u(x,ω) − u(y,ω))} ψ(2^{−j}λ) η_j^ν(ω) λ² dλ dω,
//! its decay envelope, row sums and the comparison with the flat synthesis
//! composed with the change of variables φ_ν.
//!
//! The λ-integral only depends on t = u(x,ω) − u(y,ω):
//!   ∫ ψ(2^{−j}λ) λ² e^{iλt} dλ = 2^{3j} R(2^j t),  R(s) = ∫ ψ(μ) μ² e^{iμs} dμ,
//! so R is tabulated once and interpolated; the ω-integral runs over a
//! Gauss–Legendre × trapezoid rule on the patch cap.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, OnceLock};

use gauss_quad::legendre::GaussLegendre;
use nalgebra::Vector3;
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dyadic::{band, AngularPatchFamily};
use crate::error::{Error, Result};
use crate::fio::{spectrum, FioOperator, Piece, SymbolField};
use crate::grid::{pairwise_sum, spatial_l2_norm, tangent_pair, HalfDensity, SpatialField, SpatialGrid};
use crate::phase::PhaseField;
use crate::rng;

// ============================================================================
// Radial factor
// ============================================================================

struct RadialTable {
    step: f64,
    values: Vec<Complex64>,
    slopes: Vec<Complex64>,
}

const TABLE_LOG2: u32 = 20;
const TABLE_DMU: f64 = 1.0 / 1024.0;
const TABLE_SMAX: f64 = 2500.0;

impl RadialTable {
    fn build() -> Self {
        let n = 1usize << TABLE_LOG2;
        let mut vals = vec![Complex64::new(0.0, 0.0); n];
        let mut ders = vec![Complex64::new(0.0, 0.0); n];
        for m in 0..n {
            let mu = m as f64 * TABLE_DMU;
            if mu > 2.0 {
                break;
            }
            let f = band(mu) * mu * mu * TABLE_DMU;
            vals[m] = Complex64::new(f, 0.0);
            ders[m] = Complex64::new(0.0, mu * f);
        }
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_inverse(n);
        fft.process(&mut vals);
        fft.process(&mut ders);
        let step = 2.0 * std::f64::consts::PI / (n as f64 * TABLE_DMU);
        let keep = (TABLE_SMAX / step).ceil() as usize + 2;
        vals.truncate(keep);
        ders.truncate(keep);
        Self { step, values: vals, slopes: ders }
    }

    fn eval_pos(&self, s: f64) -> Complex64 {
        let x = s / self.step;
        let k = x as usize;
        if k + 1 >= self.values.len() {
            return Complex64::new(0.0, 0.0);
        }
        let t = x - k as f64;
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        self.values[k] * h00
            + self.slopes[k] * (h10 * self.step)
            + self.values[k + 1] * h01
            + self.slopes[k + 1] * (h11 * self.step)
    }

    #[inline]
    fn eval(&self, s: f64) -> Complex64 {
        if s >= 0.0 {
            self.eval_pos(s)
        } else {
            self.eval_pos(-s).conj()
        }
    }
}

fn radial_table() -> &'static RadialTable {
    static TABLE: OnceLock<RadialTable> = OnceLock::new();
    TABLE.get_or_init(RadialTable::build)
}

/// R(s) = ∫ ψ(μ) μ² e^{iμs} dμ.
pub fn radial_profile(s: f64) -> Complex64 {
    radial_table().eval(s)
}

// ============================================================================
// Cap quadrature
// ============================================================================

struct CapRule {
    nodes: Vec<Vector3<f64>>,
    /// quadrature weight × η_j^ν
    weights: Vec<f64>,
}

/// Evaluates K for one angular piece.
pub struct KernelEvaluator {
    pub phase: PhaseField,
    pub j: i32,
    pub nu: usize,
    center: Vector3<f64>,
    radius: f64,
    theta_max: f64,
    neighbors: Vec<Vector3<f64>>,
    /// multiplies the adaptive node counts
    pub resolution: f64,
    cache: Mutex<HashMap<(usize, usize), Arc<CapRule>>>,
}

impl std::fmt::Debug for KernelEvaluator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KernelEvaluator").field("j", &self.j).field("nu", &self.nu).finish()
    }
}

const BASE_THETA: usize = 32;
const BASE_PHI: usize = 64;
const MAX_NODES: usize = 1024;

impl KernelEvaluator {
    pub fn new(phase: &PhaseField, family: &AngularPatchFamily, nu: usize) -> Result<Self> {
        if nu >= family.len() {
            return Err(Error::UnknownPiece(format!("j={},nu={nu}", family.j)));
        }
        let center = family.centers()[nu];
        let radius = family.cap_radius();
        let neighbors =
            family.centers().iter().filter(|c| (*c - center).norm() < 2.0 * radius + 1e-12).copied().collect();
        Ok(Self {
            phase: phase.clone(),
            j: family.j,
            nu,
            center,
            radius,
            theta_max: 2.0 * (0.5 * radius).asin(),
            neighbors,
            resolution: 1.0,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn with_resolution(mut self, r: f64) -> Self {
        self.resolution = r;
        self
    }

    pub fn center(&self) -> Vector3<f64> {
        self.center
    }

    fn eta(&self, w: &Vector3<f64>) -> f64 {
        let r2 = self.radius * self.radius;
        let beta = |c: &Vector3<f64>| {
            let q = (w - c).norm_squared() / r2;
            if q >= 1.0 {
                0.0
            } else {
                (-1.0 / (1.0 - q)).exp()
            }
        };
        let own = beta(&self.center);
        if own == 0.0 {
            return 0.0;
        }
        own / self.neighbors.iter().map(beta).sum::<f64>()
    }

    fn rule(&self, n_theta: usize, n_phi: usize) -> Arc<CapRule> {
        if let Some(r) = self.cache.lock().expect("cache lock").get(&(n_theta, n_phi)) {
            return r.clone();
        }
        let gl = GaussLegendre::new(std::num::NonZeroUsize::new(n_theta).expect("positive node count"));
        let (e1, e2) = tangent_pair(&self.center);
        let half = 0.5 * self.theta_max;
        let dphi = 2.0 * std::f64::consts::PI / n_phi as f64;
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for (x, wx) in gl.iter() {
            let th = half * (x + 1.0);
            let (st, ct) = th.sin_cos();
            for k in 0..n_phi {
                let (sp, cp) = (k as f64 * dphi).sin_cos();
                let w = self.center * ct + (e1 * cp + e2 * sp) * st;
                let eta = self.eta(&w);
                if eta > 0.0 {
                    nodes.push(w);
                    weights.push(wx * half * st * dphi * eta);
                }
            }
        }
        let rule = Arc::new(CapRule { nodes, weights });
        self.cache.lock().expect("cache lock").insert((n_theta, n_phi), rule.clone());
        rule
    }

    /// Node counts that resolve the ω-oscillation of the pair.
    fn counts(&self, du: f64, dd: f64) -> (usize, usize) {
        let lmax = 2f64.powi(self.j + 1);
        let var_theta = lmax * (dd + du.abs() * self.theta_max) * self.theta_max;
        let var_phi = 2.0 * std::f64::consts::PI * lmax * dd * self.theta_max;
        let round8 = |v: f64| ((v / 8.0).ceil() as usize * 8).min(MAX_NODES);
        let nt = round8(self.resolution * (BASE_THETA as f64 + 0.6 * var_theta));
        let np = round8(self.resolution * (BASE_PHI as f64 + 0.6 * var_phi));
        (nt, np)
    }

    /// K(x, y).
    pub fn eval(&self, x: &Vector3<f64>, y: &Vector3<f64>) -> Complex64 {
        let (du, dd) = envelope_args_raw(&self.phase, &self.center, x, y);
        let (nt, np) = self.counts(du, dd);
        let rule = self.rule(nt, np);
        let table = radial_table();
        let scale = 2f64.powi(self.j);
        let mut acc_re = Vec::with_capacity(rule.nodes.len());
        let mut acc_im = Vec::with_capacity(rule.nodes.len());
        for (w, q) in rule.nodes.iter().zip(&rule.weights) {
            let t = self.phase.value(x, w) - self.phase.value(y, w);
            let r = table.eval(scale * t) * *q;
            acc_re.push(r.re);
            acc_im.push(r.im);
        }
        Complex64::new(pairwise_sum(&acc_re), pairwise_sum(&acc_im)) * scale.powi(3)
    }

    /// Σ_ω η(ω) w_ω of the cap rule at base resolution.
    pub fn patch_mass(&self) -> f64 {
        let (nt, np) = self.counts(0.0, 0.0);
        pairwise_sum(&self.rule(nt, np).weights)
    }
}

/// K(x,y) for one pair; builds a throwaway evaluator.
pub fn evaluate_kernel(
    phase: &PhaseField,
    family: &AngularPatchFamily,
    nu: usize,
    x: &Vector3<f64>,
    y: &Vector3<f64>,
) -> Result<Complex64> {
    Ok(KernelEvaluator::new(phase, family, nu)?.eval(x, y))
}

// ============================================================================
// Envelope
// ============================================================================

/// (|Δu|, |Δ∂_ω u|) at ν.
fn envelope_args_raw(phase: &PhaseField, nu: &Vector3<f64>, x: &Vector3<f64>, y: &Vector3<f64>) -> (f64, f64) {
    if phase.is_flat() {
        let d = x - y;
        let du = d.dot(nu);
        return (du.abs(), (d - nu * du).norm());
    }
    let dx = phase.derivatives(x, nu);
    let dy = phase.derivatives(y, nu);
    ((dx.u - dy.u).abs(), (dx.domega - dy.domega).norm())
}

/// (2^j|Δu|, 2^{j/2}|Δ∂_ω u|).
pub fn envelope_args(phase: &PhaseField, j: i32, nu: &Vector3<f64>, x: &Vector3<f64>, y: &Vector3<f64>) -> (f64, f64) {
    let (du, dd) = envelope_args_raw(phase, nu, x, y);
    (2f64.powi(j) * du, 2f64.powf(j as f64 / 2.0) * dd)
}

/// 2^j(1 + |A − B|)^{−2} · 2^j(1 + B)^{−3} with (A, B) from `envelope_args`.
pub fn decay_envelope(phase: &PhaseField, j: i32, nu: &Vector3<f64>, x: &Vector3<f64>, y: &Vector3<f64>) -> f64 {
    let (a, b) = envelope_args(phase, j, nu, x, y);
    envelope_from_args(j, a, b)
}

pub fn envelope_from_args(j: i32, a: f64, b: f64) -> f64 {
    let s = 2f64.powi(j);
    let p = 1.0 + (a - b).abs();
    let q = 1.0 + b;
    s / (p * p) * s / (q * q * q)
}

// ============================================================================
// Pair scans
// ============================================================================

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    /// lower edge of the first logarithmic shell
    pub smallest: f64,
    /// shells per decade
    pub shells_per_decade: usize,
    pub pairs_per_shell: usize,
    /// largest |x − y|
    pub max_distance: f64,
    /// radius of the ball holding the first point of each pair
    pub anchor_radius: f64,
    pub anchor: [f64; 3],
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            smallest: 0.01,
            shells_per_decade: 2,
            pairs_per_shell: 8,
            max_distance: 8.0,
            anchor_radius: 1.0,
            anchor: [0.0; 3],
        }
    }
}

/// Pairs stratified by logarithmic shells of both envelope arguments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelProbe {
    pub j: i32,
    pub nu: usize,
    pub center: [f64; 3],
    /// shell edges of A and B; shell 0 is [0, edges[0])
    pub edges_a: Vec<f64>,
    pub edges_b: Vec<f64>,
    pub pairs: Vec<([f64; 3], [f64; 3])>,
}

fn shell_edges(smallest: f64, largest: f64, per_decade: usize) -> Vec<f64> {
    let mut edges = vec![smallest];
    let step = 10f64.powf(1.0 / per_decade as f64);
    while *edges.last().expect("nonempty") < largest {
        let next = edges.last().expect("nonempty") * step;
        edges.push(next);
    }
    edges
}

fn shell_of(edges: &[f64], v: f64) -> usize {
    edges.iter().position(|e| v < *e).unwrap_or(edges.len())
}

impl KernelProbe {
    /// Targets (A, B) are drawn log-uniformly inside each shell and realized
    /// with the flat relation y = x − (A/2^j)ν − (B/2^{j/2})e, e ⟂ ν.
    pub fn sample(family: &AngularPatchFamily, nu: usize, seed: u64, opts: &ProbeOptions) -> Result<Self> {
        if nu >= family.len() {
            return Err(Error::UnknownPiece(format!("j={},nu={nu}", family.j)));
        }
        let j = family.j;
        let center = family.centers()[nu];
        let sa = 2f64.powi(j);
        let sb = 2f64.powf(j as f64 / 2.0);
        let reach = opts.max_distance / std::f64::consts::SQRT_2;
        let edges_a = shell_edges(opts.smallest, sa * reach, opts.shells_per_decade);
        let edges_b = shell_edges(opts.smallest, sb * reach, opts.shells_per_decade);
        let (e1, e2) = tangent_pair(&center);
        let anchor = Vector3::from(opts.anchor);
        let mut rng = rng::stream(seed, 0);
        let mut pairs = Vec::new();
        let bounds = |edges: &[f64], i: usize, top: f64| -> (f64, f64) {
            let lo = if i == 0 { edges[0] * 1e-2 } else { edges[i - 1] };
            (lo, edges.get(i).copied().unwrap_or(top).min(top))
        };
        for ia in 0..edges_a.len() {
            for ib in 0..edges_b.len() {
                let (a0, a1) = bounds(&edges_a, ia, sa * reach);
                let (b0, b1) = bounds(&edges_b, ib, sb * reach);
                if a0 >= a1 || b0 >= b1 {
                    continue;
                }
                for _ in 0..opts.pairs_per_shell {
                    let a = (a0.ln() + rng.random::<f64>() * (a1.ln() - a0.ln())).exp();
                    let b = (b0.ln() + rng.random::<f64>() * (b1.ln() - b0.ln())).exp();
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    let phi = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
                    let e = e1 * phi.cos() + e2 * phi.sin();
                    let x = loop {
                        let p = Vector3::new(
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                        );
                        if p.norm_squared() <= 1.0 {
                            break anchor + p * opts.anchor_radius;
                        }
                    };
                    let y = x - center * (sign * a / sa) - e * (b / sb);
                    pairs.push((x.into(), y.into()));
                }
            }
        }
        Ok(Self { j, nu, center: center.into(), edges_a, edges_b, pairs })
    }

    /// Same pairs shifted by c.
    pub fn translated(&self, c: [f64; 3]) -> Self {
        let c = Vector3::from(c);
        let shift = |p: [f64; 3]| -> [f64; 3] { (Vector3::from(p) + c).into() };
        Self { pairs: self.pairs.iter().map(|(x, y)| (shift(*x), shift(*y))).collect(), ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelRow {
    pub x: [f64; 3],
    pub y: [f64; 3],
    pub arg_a: f64,
    pub arg_b: f64,
    pub kernel_abs: f64,
    pub envelope: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelScan {
    pub j: i32,
    pub nu: usize,
    pub diagonal: f64,
    pub rows: Vec<KernelRow>,
    pub sup_ratio: f64,
    /// (shell of A, shell of B, max ratio)
    pub strata: Vec<(usize, usize, f64)>,
}

pub fn decay_ratio_scan(probe: &KernelProbe, phase: &PhaseField, family: &AngularPatchFamily) -> Result<KernelScan> {
    if family.j != probe.j {
        return Err(Error::InvalidArgument(format!("probe at j={} used with family at j={}", probe.j, family.j)));
    }
    let ev = KernelEvaluator::new(phase, family, probe.nu)?;
    let center = ev.center();
    let rows: Vec<KernelRow> = probe
        .pairs
        .par_iter()
        .map(|(x, y)| {
            let (xv, yv) = (Vector3::from(*x), Vector3::from(*y));
            let k = ev.eval(&xv, &yv).norm();
            let (a, b) = envelope_args(phase, probe.j, &center, &xv, &yv);
            let envelope = envelope_from_args(probe.j, a, b);
            KernelRow { x: *x, y: *y, arg_a: a, arg_b: b, kernel_abs: k, envelope, ratio: k / envelope }
        })
        .collect();
    let mut strata: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for r in &rows {
        let key = (shell_of(&probe.edges_a, r.arg_a), shell_of(&probe.edges_b, r.arg_b));
        let e = strata.entry(key).or_insert(0.0);
        *e = e.max(r.ratio);
    }
    let sup_ratio = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let origin = Vector3::zeros();
    let diagonal = ev.eval(&origin, &origin).norm();
    Ok(KernelScan {
        j: probe.j,
        nu: probe.nu,
        diagonal,
        rows,
        sup_ratio,
        strata: strata.into_iter().map(|((a, b), v)| (a, b, v)).collect(),
    })
}

// ============================================================================
// Row sums
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchurBox {
    /// half-length along ν in units of 2^{−j}
    pub long_units: f64,
    /// transverse half-width in units of 2^{−j/2}/δ
    pub trans_units: f64,
    pub n_long: usize,
    pub n_trans: usize,
}

impl Default for SchurBox {
    fn default() -> Self {
        Self { long_units: 32.0, trans_units: 6.0, n_long: 64, n_trans: 32 }
    }
}

impl SchurBox {
    pub fn grid(&self, x: &Vector3<f64>, nu: &Vector3<f64>, j: i32, delta: f64) -> Result<SpatialGrid> {
        SpatialGrid::oriented_box(
            *x,
            *nu,
            self.long_units * 2f64.powi(-j),
            self.trans_units * 2f64.powf(-j as f64 / 2.0) / delta,
            self.n_long,
            self.n_trans,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowSum {
    pub raw: f64,
    pub flat: f64,
    /// raw / flat
    pub normalized: f64,
}

/// Σ_y w_y |K(x,y)| over `sgrid`, with the flat sum on the same grid.
pub fn schur_row_sum(
    phase: &PhaseField,
    family: &AngularPatchFamily,
    nu: usize,
    x: &Vector3<f64>,
    sgrid: &SpatialGrid,
) -> Result<RowSum> {
    let row = |p: &PhaseField| -> Result<f64> {
        let ev = KernelEvaluator::new(p, family, nu)?;
        let terms: Vec<f64> = sgrid
            .points()
            .par_iter()
            .zip(sgrid.weights().par_iter())
            .map(|(y, w)| w * ev.eval(x, y).norm())
            .collect();
        Ok(pairwise_sum(&terms))
    };
    let raw = row(phase)?;
    let flat = if phase.is_flat() { raw } else { row(&PhaseField::flat())? };
    Ok(RowSum { raw, flat, normalized: raw / flat })
}

// ============================================================================
// Flat comparison
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlatGap {
    pub gap: f64,
    pub gamma: f64,
    /// gap / γ_j^ν
    pub ratio: f64,
    pub degenerate_points: usize,
}

/// ‖S_j^ν f − S̃_j^ν f‖ where S̃_j^ν f(x) is the flat synthesis of
/// ψ(2^{−j}λ)η_j^ν f evaluated at φ_ν(x). Both use the unit symbol.
pub fn flat_comparison_gap(op: &FioOperator, j: i32, nu: usize, f: &HalfDensity) -> Result<FlatGap> {
    let unit = op.with_symbol(SymbolField::Unit);
    let piece = Piece::patch(j, nu);
    let s = unit.apply_piece(f, &piece)?;
    let center = op.angular_family(j).ok_or_else(|| Error::UnknownPiece(format!("octave {j}")))?.centers()[nu];
    let mut degenerate_points = 0;
    let moved: Vec<Vector3<f64>> = op
        .sgrid
        .points()
        .iter()
        .map(|x| {
            let c = op.phase.change_of_variable(&center, x);
            if c.degenerate {
                degenerate_points += 1;
            }
            c.image
        })
        .collect();
    let mut flat = unit.with_phase(PhaseField::flat());
    flat.sgrid = SpatialGrid::from_points(moved, op.sgrid.weights().to_vec())?;
    let st = flat.apply_piece(f, &piece)?;
    let diff = SpatialField { values: s.values.iter().zip(&st.values).map(|(a, b)| a - b).collect() };
    let gap = spatial_l2_norm(&diff, &op.sgrid)?;
    let gamma = spectrum(op, f, None)?.gamma_j_nu[&j][nu];
    if gamma < crate::fio::GAMMA_FLOOR {
        return Err(Error::InvalidArgument(format!("degenerate γ at j={j}, nu={nu}")));
    }
    Ok(FlatGap { gap, gamma, ratio: gap / gamma, degenerate_points })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radial_table_matches_direct_quadrature() {
        let (nodes, weights) = crate::grid::log_trapezoid(0.5, 2.0, 4001);
        for s in [0.0, 0.37, 3.3, 17.9, -42.0, 120.5] {
            let direct: Complex64 = nodes
                .iter()
                .zip(&weights)
                .map(|(m, w)| Complex64::from_polar(band(*m) * m * m * w, m * s))
                .sum();
            let err = (radial_profile(s) - direct).norm();
            assert!(err < 1e-9, "s={s}: {err}");
        }
    }

    #[test]
    fn envelope_values() {
        let p = PhaseField::flat();
        let nu = Vector3::z();
        let x = Vector3::new(0.1, 0.2, 0.3);
        assert_eq!(decay_envelope(&p, 4, &nu, &x, &x), 256.0);
        let y = x - nu * (9.0 / 16.0);
        assert!((decay_envelope(&p, 4, &nu, &x, &y) - 2.56).abs() < 1e-12);
    }
}
