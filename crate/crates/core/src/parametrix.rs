//! Half-wave operators, the block system Λ for the data (f₊, f₋), its
//! regularized least-squares solve, the flat closed form and flat evolution.
//!
//! Unknowns are stored λ-weighted, g± = λf±. With u₊(x,ω) = u(x,ω) and
//! u₋(x,ω) = −u(x,−ω), and S_s g = Σ e^{iλu_s} g λ²w_λw_ω,
//!   Λ(g₊, g₋) = (Σ_s s∇u(x,sω) S_s g_s,  Σ_s s|∇u(x,sω)| S_s g_s),
//! whose target for data (φ₀, φ₁) is (−i∇φ₀, iφ₁).

use nalgebra::Vector3;
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    pairwise_sum, polar_l2_norm, spatial_l2_norm, vector_l2_norm, HalfDensity, PolarFrequencyGrid, SpatialField,
    SpatialGrid, VectorField,
};
use crate::phase::PhaseField;
use crate::synth::{self, Columns, Source};
use crate::{rng, spectral};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const I: Complex64 = Complex64::new(0.0, 1.0);

// ============================================================================
// Data
// ============================================================================

#[derive(Debug, Clone, PartialEq)]
pub struct InitialData {
    pub phi0: SpatialField,
    pub phi1: SpatialField,
    pub grad_phi0: VectorField,
}

/// Random data: sums of Gaussian bumps with random centers, widths and
/// amplitudes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomData {
    pub bumps: usize,
    pub center_radius: f64,
    pub width_lo: f64,
    pub width_hi: f64,
}

impl Default for RandomData {
    fn default() -> Self {
        Self { bumps: 3, center_radius: 0.3, width_lo: 0.75, width_hi: 0.85 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum DataPreset {
    Gaussian { width: f64, amplitude0: f64, amplitude1: f64 },
    Random(RandomData),
}

fn gaussian_bump(x: &Vector3<f64>, c: &Vector3<f64>, width: f64) -> f64 {
    (-(x - c).norm_squared() / (2.0 * width * width)).exp()
}

impl InitialData {
    /// Takes (φ₀, φ₁) on a lattice and computes ∇φ₀ spectrally.
    pub fn from_fields(sgrid: &SpatialGrid, phi0: SpatialField, phi1: SpatialField) -> Result<Self> {
        let lat = sgrid
            .lattice_info()
            .ok_or_else(|| Error::InvalidArgument("initial data need a lattice spatial grid".into()))?;
        phi0.check(sgrid)?;
        phi1.check(sgrid)?;
        let [gx, gy, gz] = spectral::gradient(&phi0.values, lat);
        let grad_phi0 =
            VectorField { components: [SpatialField { values: gx }, SpatialField { values: gy }, SpatialField { values: gz }] };
        Ok(Self { phi0, phi1, grad_phi0 })
    }

    /// φ₀ = a₀ G, φ₁ = a₁ G with G = exp(−|x|²/2σ²).
    pub fn gaussian(sgrid: &SpatialGrid, width: f64, amplitude0: f64, amplitude1: f64) -> Result<Self> {
        let origin = Vector3::zeros();
        let g = |a: f64| SpatialField::from_fn(sgrid, |x| Complex64::new(a * gaussian_bump(x, &origin, width), 0.0));
        Self::from_fields(sgrid, g(amplitude0), g(amplitude1))
    }

    pub fn random(sgrid: &SpatialGrid, spec: &RandomData, seed: u64, counter: u64) -> Result<Self> {
        let mut r = rng::stream(seed, counter);
        let draw = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<(f64, Vector3<f64>, f64)> {
            (0..spec.bumps)
                .map(|_| {
                    let a: f64 = r.sample(rand_distr::StandardNormal);
                    let c = loop {
                        let p = Vector3::new(
                            r.random_range(-1.0..1.0),
                            r.random_range(-1.0..1.0),
                            r.random_range(-1.0..1.0),
                        );
                        if p.norm_squared() <= 1.0 {
                            break p * spec.center_radius;
                        }
                    };
                    let w = r.random_range(spec.width_lo..=spec.width_hi);
                    (a, c, w)
                })
                .collect()
        };
        let b0 = draw(&mut r);
        let b1 = draw(&mut r);
        let field = |bumps: &[(f64, Vector3<f64>, f64)]| {
            SpatialField::from_fn(sgrid, |x| {
                Complex64::new(bumps.iter().map(|(a, c, w)| a * gaussian_bump(x, c, *w)).sum(), 0.0)
            })
        };
        Self::from_fields(sgrid, field(&b0), field(&b1))
    }

    pub fn from_preset(sgrid: &SpatialGrid, preset: &DataPreset, seed: u64, counter: u64) -> Result<Self> {
        match preset {
            DataPreset::Gaussian { width, amplitude0, amplitude1 } => {
                Self::gaussian(sgrid, *width, *amplitude0, *amplitude1)
            }
            DataPreset::Random(spec) => Self::random(sgrid, spec, seed, counter),
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        let s = Complex64::new(c, 0.0);
        Self {
            phi0: self.phi0.scaled(s),
            phi1: self.phi1.scaled(s),
            grad_phi0: VectorField { components: self.grad_phi0.components.clone().map(|f| f.scaled(s)) },
        }
    }

    /// ‖∇φ₀‖ + ‖φ₁‖
    pub fn norm(&self, sgrid: &SpatialGrid) -> Result<f64> {
        Ok(vector_l2_norm(&self.grad_phi0, sgrid)? + spatial_l2_norm(&self.phi1, sgrid)?)
    }
}

// ============================================================================
// Pairs and targets
// ============================================================================

/// (g₊, g₋) = (λf₊, λf₋).
#[derive(Debug, Clone, PartialEq)]
pub struct HalfDensityPair {
    pub plus: HalfDensity,
    pub minus: HalfDensity,
}

impl HalfDensityPair {
    pub fn zeros(g: &PolarFrequencyGrid) -> Self {
        Self { plus: HalfDensity::zeros(g), minus: HalfDensity::zeros(g) }
    }

    /// Builds the pair from f± (multiplies by λ).
    pub fn from_densities(g: &PolarFrequencyGrid, f_plus: &HalfDensity, f_minus: &HalfDensity) -> Self {
        let lams = g.radial_nodes();
        Self {
            plus: f_plus.weighted(g, |ir, _| lams[ir]),
            minus: f_minus.weighted(g, |ir, _| lams[ir]),
        }
    }

    /// f± = g±/λ.
    pub fn densities(&self, g: &PolarFrequencyGrid) -> (HalfDensity, HalfDensity) {
        let lams = g.radial_nodes();
        (self.plus.weighted(g, |ir, _| 1.0 / lams[ir]), self.minus.weighted(g, |ir, _| 1.0 / lams[ir]))
    }

    pub fn axpy(&mut self, c: Complex64, other: &Self) {
        self.plus.axpy(c, &other.plus);
        self.minus.axpy(c, &other.minus);
    }

    pub fn scale(&mut self, c: Complex64) {
        self.plus.scale(c);
        self.minus.scale(c);
    }

    /// (‖g₊‖, ‖g₋‖)
    pub fn norms(&self, g: &PolarFrequencyGrid) -> Result<(f64, f64)> {
        Ok((polar_l2_norm(&self.plus, g)?, polar_l2_norm(&self.minus, g)?))
    }

    pub fn norm_sqr(&self, g: &PolarFrequencyGrid) -> Result<f64> {
        let (a, b) = self.norms(g)?;
        Ok(a * a + b * b)
    }

    /// Relative L² distance (‖g₊ − h₊‖² + ‖g₋ − h₋‖²)^{1/2}/‖h‖.
    pub fn relative_error(&self, reference: &Self, g: &PolarFrequencyGrid) -> Result<f64> {
        let mut d = self.clone();
        d.axpy(Complex64::new(-1.0, 0.0), reference);
        Ok((d.norm_sqr(g)? / reference.norm_sqr(g)?).sqrt())
    }
}

/// (H, h) with H ≈ −i∇φ₀ and h ≈ iφ₁.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemTarget {
    pub vector: VectorField,
    pub scalar: SpatialField,
}

impl SystemTarget {
    pub fn zeros(n: usize) -> Self {
        Self { vector: VectorField::zeros(n), scalar: SpatialField::zeros(n) }
    }

    pub fn from_data(data: &InitialData) -> Self {
        Self {
            vector: VectorField { components: data.grad_phi0.components.clone().map(|f| f.scaled(-I)) },
            scalar: data.phi1.scaled(I),
        }
    }

    pub fn norm(&self, s: &SpatialGrid) -> Result<f64> {
        let v = vector_l2_norm(&self.vector, s)?;
        let h = spatial_l2_norm(&self.scalar, s)?;
        Ok((v * v + h * h).sqrt())
    }

    pub fn axpy(&mut self, c: Complex64, other: &Self) {
        for k in 0..3 {
            self.vector.components[k].axpy(c, &other.vector.components[k]);
        }
        self.scalar.axpy(c, &other.scalar);
    }
}

// ============================================================================
// Half-wave operators (direct sums)
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HalfwaveKind {
    M,
    Q,
    P,
    GradM,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Self::Plus => 1.0,
            Self::Minus => -1.0,
        }
    }
}

struct HalfwaveSource<'a> {
    phase: &'a PhaseField,
    kind: HalfwaveKind,
    s: f64,
}

impl Source for HalfwaveSource<'_> {
    fn components(&self) -> usize {
        match self.kind {
            HalfwaveKind::M | HalfwaveKind::Q => 1,
            HalfwaveKind::P | HalfwaveKind::GradM => 3,
        }
    }
    #[inline]
    fn eval(&self, _ix: usize, x: &Vector3<f64>, _ia: usize, w: &Vector3<f64>, sym: &mut [Complex64]) -> f64 {
        let ws = w * self.s;
        let (u, grad) = self.phase.first_order(x, &ws);
        match self.kind {
            HalfwaveKind::M => sym[0] = Complex64::new(1.0, 0.0),
            HalfwaveKind::Q => sym[0] = Complex64::new(grad.norm(), 0.0),
            HalfwaveKind::P => {
                let n = grad / grad.norm();
                for k in 0..3 {
                    sym[k] = Complex64::new(n[k], 0.0);
                }
            }
            HalfwaveKind::GradM => {
                for k in 0..3 {
                    sym[k] = Complex64::new(0.0, self.s * grad[k]);
                }
            }
        }
        self.s * u
    }
}

/// M±f, Q±f (one component) or P±f, ∇M±f (three components) on `sgrid`.
/// The phase is ±u(x,±ω) and the density is read at the node ω.
pub fn apply_halfwave(
    kind: HalfwaveKind,
    sign: Sign,
    phase: &PhaseField,
    fgrid: &PolarFrequencyGrid,
    sgrid: &SpatialGrid,
    f: &HalfDensity,
) -> Result<Vec<SpatialField>> {
    f.check(fgrid)?;
    let src = HalfwaveSource { phase, kind, s: sign.value() };
    let lams = fgrid.radial_nodes();
    let cols = if kind == HalfwaveKind::GradM {
        Columns::build(fgrid, &[f], |ir, _| lams[ir])
    } else {
        Columns::build(fgrid, &[f], |_, _| 1.0)
    };
    if cols.is_empty() {
        return Ok(vec![SpatialField::zeros(sgrid.len()); src.components()]);
    }
    Ok(synth::forward(fgrid, sgrid, &cols, &src).remove(0).into_iter().map(|values| SpatialField { values }).collect())
}

// ============================================================================
// The block operator
// ============================================================================

/// Symbol of one sign of Λ: (s∇u(x,sω), s|∇u(x,sω)|), phase s·u(x,sω).
struct SystemSource<'a> {
    phase: &'a PhaseField,
    s: f64,
}

impl Source for SystemSource<'_> {
    fn components(&self) -> usize {
        4
    }
    #[inline]
    fn eval(&self, _ix: usize, x: &Vector3<f64>, _ia: usize, w: &Vector3<f64>, sym: &mut [Complex64]) -> f64 {
        let (u, grad) = self.phase.first_order(x, &(w * self.s));
        for k in 0..3 {
            sym[k] = Complex64::new(self.s * grad[k], 0.0);
        }
        sym[3] = Complex64::new(self.s * grad.norm(), 0.0);
        self.s * u
    }
}

/// How Λ and Λ* are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "engine", rename_all = "snake_case")]
pub enum SystemEngine {
    /// Direct sums over (x, λ, ω).
    Direct,
    /// The radial sums Σ_λ c_λ e^{iλt} are tabulated on a uniform t-grid of
    /// step `step_factor`/λ_max and read with 8-point Lagrange
    /// interpolation; the adjoint uses the exact transpose.
    Tabulated { step_factor: f64 },
}

impl Default for SystemEngine {
    fn default() -> Self {
        Self::Tabulated { step_factor: 0.4 }
    }
}

const STENCIL: usize = 8;

#[derive(Debug, Clone)]
struct Tabulation {
    t0: f64,
    dt: f64,
    len: usize,
    /// e^{iλ_r t_m}, row-major in m
    table: Vec<Complex64>,
}

impl Tabulation {
    fn build(fgrid: &PolarFrequencyGrid, reach: f64, step_factor: f64) -> Self {
        let lams = fgrid.radial_nodes();
        let lmax = lams.iter().copied().fold(0.0, f64::max);
        let dt = step_factor / lmax;
        let half = reach + (STENCIL as f64 + 2.0) * dt;
        let len = (2.0 * half / dt).ceil() as usize + 1;
        let t0 = -half;
        let mut table = Vec::with_capacity(len * lams.len());
        for m in 0..len {
            let t = t0 + m as f64 * dt;
            for l in lams {
                table.push(Complex64::from_polar(1.0, l * t));
            }
        }
        Self { t0, dt, len, table }
    }

    /// First stencil index and the 8 Lagrange weights at t.
    #[inline]
    fn stencil(&self, t: f64) -> (usize, [f64; STENCIL]) {
        let x = (t - self.t0) / self.dt;
        let base = x.floor() as isize - (STENCIL as isize / 2 - 1);
        debug_assert!(base >= 0 && (base as usize) + STENCIL <= self.len, "t = {t} outside the table");
        let m0 = base.clamp(0, (self.len - STENCIL) as isize) as usize;
        let tau = x - m0 as f64;
        let mut pre = [1.0; STENCIL + 1];
        let mut suf = [1.0; STENCIL + 1];
        for k in 0..STENCIL {
            pre[k + 1] = pre[k] * (tau - k as f64);
        }
        for k in (0..STENCIL).rev() {
            suf[k] = suf[k + 1] * (tau - k as f64);
        }
        let mut w = [0.0; STENCIL];
        for k in 0..STENCIL {
            w[k] = pre[k] * suf[k + 1] * LAGRANGE_DENOM[k];
        }
        (m0, w)
    }
}

/// 1/Π_{i≠k}(k − i) for nodes 0..8.
const LAGRANGE_DENOM: [f64; STENCIL] = [
    -1.0 / 5040.0,
    1.0 / 720.0,
    -1.0 / 240.0,
    1.0 / 144.0,
    -1.0 / 144.0,
    1.0 / 240.0,
    -1.0 / 720.0,
    1.0 / 5040.0,
];

/// Λ, Λ* and the regularization μ for one phase and pair of grids.
#[derive(Debug, Clone)]
pub struct OperatorSystem {
    pub phase: PhaseField,
    pub fgrid: PolarFrequencyGrid,
    pub sgrid: SpatialGrid,
    pub mu: f64,
    pub engine: SystemEngine,
    tab: Option<Tabulation>,
}

/// ‖Λ‖² for the flat phase in the continuum limit: ΛΛ* = 2(2π)³ on data.
pub fn flat_system_scale() -> f64 {
    2.0 * (2.0 * std::f64::consts::PI).powi(3)
}

/// Default Tikhonov weight 10⁻⁸ · ‖Λ_flat‖².
pub fn default_mu() -> f64 {
    1e-8 * flat_system_scale()
}

pub fn assemble_system(
    phase: &PhaseField,
    fgrid: &PolarFrequencyGrid,
    sgrid: &SpatialGrid,
    mu: f64,
    engine: SystemEngine,
) -> Result<OperatorSystem> {
    if !(mu >= 0.0) {
        return Err(Error::InvalidArgument(format!("mu must be ≥ 0, got {mu}")));
    }
    let tab = match engine {
        SystemEngine::Direct => None,
        SystemEngine::Tabulated { step_factor } => {
            if !(step_factor > 0.0 && step_factor <= 1.0) {
                return Err(Error::InvalidArgument(format!("step_factor must lie in (0, 1], got {step_factor}")));
            }
            let reach = sgrid.bounding_radius() + phase.perturbation_bound() + 1e-9;
            Some(Tabulation::build(fgrid, reach, step_factor))
        }
    };
    Ok(OperatorSystem { phase: phase.clone(), fgrid: fgrid.clone(), sgrid: sgrid.clone(), mu, engine, tab })
}

/// Number of ω-ranges reduced independently in the forward direction.
const FORWARD_CHUNKS: usize = 16;

impl OperatorSystem {
    pub fn apply(&self, g: &HalfDensityPair) -> Result<SystemTarget> {
        Ok(self.apply_batch(&[g])?.remove(0))
    }

    pub fn adjoint(&self, t: &SystemTarget) -> Result<HalfDensityPair> {
        Ok(self.adjoint_batch(&[t])?.remove(0))
    }

    pub fn apply_batch(&self, gs: &[&HalfDensityPair]) -> Result<Vec<SystemTarget>> {
        for g in gs {
            g.plus.check(&self.fgrid)?;
            g.minus.check(&self.fgrid)?;
        }
        if gs.is_empty() {
            return Ok(Vec::new());
        }
        Ok(match &self.tab {
            None => self.apply_direct(gs),
            Some(tab) => self.apply_tabulated(tab, gs),
        })
    }

    pub fn adjoint_batch(&self, ts: &[&SystemTarget]) -> Result<Vec<HalfDensityPair>> {
        for t in ts {
            t.scalar.check(&self.sgrid)?;
            for c in &t.vector.components {
                c.check(&self.sgrid)?;
            }
        }
        if ts.is_empty() {
            return Ok(Vec::new());
        }
        Ok(match &self.tab {
            None => self.adjoint_direct(ts),
            Some(tab) => self.adjoint_tabulated(tab, ts),
        })
    }

    fn apply_direct(&self, gs: &[&HalfDensityPair]) -> Vec<SystemTarget> {
        let n = self.sgrid.len();
        let mut out = vec![SystemTarget::zeros(n); gs.len()];
        for s in [1.0, -1.0] {
            let dens: Vec<&HalfDensity> = gs.iter().map(|g| if s > 0.0 { &g.plus } else { &g.minus }).collect();
            let cols = Columns::build(&self.fgrid, &dens, |_, _| 1.0);
            if cols.is_empty() {
                continue;
            }
            let src = SystemSource { phase: &self.phase, s };
            let res = synth::forward(&self.fgrid, &self.sgrid, &cols, &src);
            for (b, comps) in res.into_iter().enumerate() {
                for (c, values) in comps.into_iter().enumerate() {
                    let f = SpatialField { values };
                    let dst = if c < 3 { &mut out[b].vector.components[c] } else { &mut out[b].scalar };
                    dst.axpy(Complex64::new(1.0, 0.0), &f);
                }
            }
        }
        out
    }

    fn adjoint_direct(&self, ts: &[&SystemTarget]) -> Vec<HalfDensityPair> {
        let fields: Vec<Vec<&[Complex64]>> = ts
            .iter()
            .map(|t| {
                let mut v: Vec<&[Complex64]> = t.vector.components.iter().map(|c| c.values.as_slice()).collect();
                v.push(t.scalar.values.as_slice());
                v
            })
            .collect();
        let plus = synth::adjoint(&self.fgrid, &self.sgrid, &fields, &SystemSource { phase: &self.phase, s: 1.0 }, |_| true);
        let minus =
            synth::adjoint(&self.fgrid, &self.sgrid, &fields, &SystemSource { phase: &self.phase, s: -1.0 }, |_| true);
        plus.into_iter().zip(minus).map(|(plus, minus)| HalfDensityPair { plus, minus }).collect()
    }

    fn apply_tabulated(&self, tab: &Tabulation, gs: &[&HalfDensityPair]) -> Vec<SystemTarget> {
        let batch = gs.len();
        let nc = 2 * batch;
        let n_r = self.fgrid.n_radial();
        let n_a = self.fgrid.n_angular();
        let n_x = self.sgrid.len();
        let nodes = self.fgrid.angular_nodes();
        let pts = self.sgrid.points();
        let flat_at: Vec<bool> = pts.iter().map(|x| self.phase.is_flat_at(x)).collect();
        let chunk = n_a.div_ceil(FORWARD_CHUNKS);
        let partials: Vec<Vec<Complex64>> = (0..FORWARD_CHUNKS)
            .into_par_iter()
            .map(|ci| {
                // acc[(ix * batch + b) * 4 + comp]
                let mut acc = vec![ZERO; n_x * batch * 4];
                let mut coef = vec![ZERO; n_r * nc];
                let mut table = vec![ZERO; tab.len * nc];
                let mut sums = vec![ZERO; nc];
                for ia in ci * chunk..((ci + 1) * chunk).min(n_a) {
                    let w = nodes[ia];
                    let mut any = false;
                    for ir in 0..n_r {
                        let m = self.fgrid.measure(ir, ia);
                        for (b, g) in gs.iter().enumerate() {
                            let cp = g.plus.get(ir, ia) * m;
                            let cm = g.minus.get(ir, ia) * m;
                            any |= cp != ZERO || cm != ZERO;
                            coef[ir * nc + 2 * b] = cp;
                            coef[ir * nc + 2 * b + 1] = cm;
                        }
                    }
                    if !any {
                        continue;
                    }
                    // F_c(t_m) = Σ_r e^{iλ_r t_m} coef[r][c]
                    for m in 0..tab.len {
                        let row = &tab.table[m * n_r..(m + 1) * n_r];
                        let out = &mut table[m * nc..(m + 1) * nc];
                        out.fill(ZERO);
                        for (ir, e) in row.iter().enumerate() {
                            let cr = &coef[ir * nc..(ir + 1) * nc];
                            for c in 0..nc {
                                out[c] += e * cr[c];
                            }
                        }
                    }
                    let interp = |t: f64, sums: &mut [Complex64]| {
                        let (m0, lw) = tab.stencil(t);
                        sums.fill(ZERO);
                        for (k, l) in lw.iter().enumerate() {
                            let row = &table[(m0 + k) * nc..(m0 + k + 1) * nc];
                            for c in 0..nc {
                                sums[c] += row[c] * *l;
                            }
                        }
                    };
                    for (ix, x) in pts.iter().enumerate() {
                        let a = &mut acc[ix * batch * 4..(ix + 1) * batch * 4];
                        if flat_at[ix] {
                            interp(x.dot(&w), &mut sums);
                            for b in 0..batch {
                                let (sp, sm) = (sums[2 * b], sums[2 * b + 1]);
                                let tot = sp + sm;
                                for k in 0..3 {
                                    a[b * 4 + k] += tot * w[k];
                                }
                                a[b * 4 + 3] += sp - sm;
                            }
                        } else {
                            for (si, s) in [1.0, -1.0].into_iter().enumerate() {
                                let (u, grad) = self.phase.first_order(x, &(w * s));
                                let gn = grad.norm();
                                interp(s * u, &mut sums);
                                for b in 0..batch {
                                    let v = sums[2 * b + si];
                                    for k in 0..3 {
                                        a[b * 4 + k] += v * (s * grad[k]);
                                    }
                                    a[b * 4 + 3] += v * (s * gn);
                                }
                            }
                        }
                    }
                }
                acc
            })
            .collect();
        let mut out = vec![SystemTarget::zeros(n_x); batch];
        for ix in 0..n_x {
            for b in 0..batch {
                for comp in 0..4 {
                    let mut v = ZERO;
                    for p in &partials {
                        v += p[(ix * batch + b) * 4 + comp];
                    }
                    let dst = if comp < 3 { &mut out[b].vector.components[comp] } else { &mut out[b].scalar };
                    dst.values[ix] = v;
                }
            }
        }
        out
    }

    fn adjoint_tabulated(&self, tab: &Tabulation, ts: &[&SystemTarget]) -> Vec<HalfDensityPair> {
        let batch = ts.len();
        let nc = 2 * batch;
        let n_r = self.fgrid.n_radial();
        let pts = self.sgrid.points();
        let wts = self.sgrid.weights();
        let flat_at: Vec<bool> = pts.iter().map(|x| self.phase.is_flat_at(x)).collect();
        let columns: Vec<Vec<Complex64>> = self
            .fgrid
            .angular_nodes()
            .par_iter()
            .map(|w| {
                let mut table = vec![ZERO; tab.len * nc];
                let mut vals = vec![ZERO; nc];
                let mut scatter = |t: f64, vals: &[Complex64], only: Option<usize>| {
                    let (m0, lw) = tab.stencil(t);
                    for (k, l) in lw.iter().enumerate() {
                        let row = &mut table[(m0 + k) * nc..(m0 + k + 1) * nc];
                        match only {
                            None => {
                                for c in 0..nc {
                                    row[c] += vals[c] * *l;
                                }
                            }
                            Some(si) => {
                                for b in 0..batch {
                                    row[2 * b + si] += vals[2 * b + si] * *l;
                                }
                            }
                        }
                    }
                };
                for (ix, x) in pts.iter().enumerate() {
                    if flat_at[ix] {
                        for (b, t) in ts.iter().enumerate() {
                            let hv = t.vector.components[0].values[ix] * w[0]
                                + t.vector.components[1].values[ix] * w[1]
                                + t.vector.components[2].values[ix] * w[2];
                            let hs = t.scalar.values[ix];
                            vals[2 * b] = (hv + hs) * wts[ix];
                            vals[2 * b + 1] = (hv - hs) * wts[ix];
                        }
                        if vals.iter().all(|v| *v == ZERO) {
                            continue;
                        }
                        scatter(x.dot(w), &vals, None);
                    } else {
                        for (si, s) in [1.0, -1.0].into_iter().enumerate() {
                            let (u, grad) = self.phase.first_order(x, &(w * s));
                            let gn = grad.norm();
                            for (b, t) in ts.iter().enumerate() {
                                let hv = t.vector.components[0].values[ix] * grad[0]
                                    + t.vector.components[1].values[ix] * grad[1]
                                    + t.vector.components[2].values[ix] * grad[2];
                                vals[2 * b + si] = (hv + t.scalar.values[ix] * gn) * (s * wts[ix]);
                            }
                            scatter(s * u, &vals, Some(si));
                        }
                    }
                }
                // A_c(λ_r) = Σ_m e^{−iλ_r t_m} table[m][c]
                let mut col = vec![ZERO; n_r * nc];
                for m in 0..tab.len {
                    let row = &tab.table[m * n_r..(m + 1) * n_r];
                    let tv = &table[m * nc..(m + 1) * nc];
                    if tv.iter().all(|v| *v == ZERO) {
                        continue;
                    }
                    for (ir, e) in row.iter().enumerate() {
                        let ec = e.conj();
                        let dst = &mut col[ir * nc..(ir + 1) * nc];
                        for c in 0..nc {
                            dst[c] += ec * tv[c];
                        }
                    }
                }
                col
            })
            .collect();
        (0..batch)
            .map(|b| {
                let mut plus = Vec::with_capacity(self.fgrid.len());
                let mut minus = Vec::with_capacity(self.fgrid.len());
                for col in &columns {
                    for ir in 0..n_r {
                        plus.push(col[ir * nc + 2 * b]);
                        minus.push(col[ir * nc + 2 * b + 1]);
                    }
                }
                HalfDensityPair {
                    plus: HalfDensity::from_values(&self.fgrid, plus).expect("grid layout"),
                    minus: HalfDensity::from_values(&self.fgrid, minus).expect("grid layout"),
                }
            })
            .collect()
    }

    /// ⟨Λg, t⟩ over the spatial grid.
    pub fn target_inner(&self, a: &SystemTarget, b: &SystemTarget) -> Complex64 {
        let w = self.sgrid.weights();
        let mut terms_re = Vec::with_capacity(w.len());
        let mut terms_im = Vec::with_capacity(w.len());
        for ix in 0..w.len() {
            let mut v = a.scalar.values[ix] * b.scalar.values[ix].conj();
            for k in 0..3 {
                v += a.vector.components[k].values[ix] * b.vector.components[k].values[ix].conj();
            }
            terms_re.push(v.re * w[ix]);
            terms_im.push(v.im * w[ix]);
        }
        Complex64::new(pairwise_sum(&terms_re), pairwise_sum(&terms_im))
    }

    pub fn pair_inner(&self, a: &HalfDensityPair, b: &HalfDensityPair) -> Complex64 {
        crate::grid::polar_inner(&a.plus, &b.plus, &self.fgrid).expect("same grid")
            + crate::grid::polar_inner(&a.minus, &b.minus, &self.fgrid).expect("same grid")
    }
}

// ============================================================================
// Solve
// ============================================================================

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub pair: HalfDensityPair,
    /// ‖Λ*(Λg − b) + μg‖ / ‖Λ*b‖
    pub residual: f64,
    /// ‖Λg − b‖ / ‖b‖
    pub misfit: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Conjugate gradients on (Λ*Λ + μ)g = Λ*b for data (φ₀, φ₁).
pub fn solve_data(system: &OperatorSystem, data: &InitialData, tol: f64, max_iter: usize) -> Result<SolveResult> {
    Ok(solve_batch(system, &[data], tol, max_iter, None)?.remove(0))
}

/// Independent solves sharing every operator application. `start` gives
/// initial guesses (zero otherwise).
pub fn solve_batch(
    system: &OperatorSystem,
    data: &[&InitialData],
    tol: f64,
    max_iter: usize,
    start: Option<&[HalfDensityPair]>,
) -> Result<Vec<SolveResult>> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tol must be positive, got {tol}")));
    }
    if let Some(s) = start {
        if s.len() != data.len() {
            return Err(Error::ShapeMismatch { expected: data.len(), got: s.len() });
        }
    }
    let n = data.len();
    let targets: Vec<SystemTarget> = data.iter().map(|d| SystemTarget::from_data(d)).collect();
    let target_refs: Vec<&SystemTarget> = targets.iter().collect();
    let rhs = system.adjoint_batch(&target_refs)?;
    let rhs_norm: Vec<f64> = rhs.iter().map(|r| system.pair_inner(r, r).re.sqrt()).collect();
    let mut g: Vec<HalfDensityPair> =
        start.map_or_else(|| vec![HalfDensityPair::zeros(&system.fgrid); n], |s| s.to_vec());
    let mut r = rhs.clone();
    if start.is_some() {
        let g_refs: Vec<&HalfDensityPair> = g.iter().collect();
        let ag = system.apply_batch(&g_refs)?;
        let ag_refs: Vec<&SystemTarget> = ag.iter().collect();
        let nag = system.adjoint_batch(&ag_refs)?;
        for b in 0..n {
            r[b].axpy(Complex64::new(-1.0, 0.0), &nag[b]);
            r[b].axpy(Complex64::new(-system.mu, 0.0), &g[b]);
        }
    }
    let mut p = r.clone();
    let mut rr: Vec<f64> = r.iter().map(|v| system.pair_inner(v, v).re).collect();
    let mut iterations = vec![0usize; n];
    let done = |b: usize, rr: &[f64]| rhs_norm[b] == 0.0 || rr[b].sqrt() <= tol * rhs_norm[b];
    for _ in 0..max_iter {
        let active: Vec<usize> = (0..n).filter(|b| !done(*b, &rr)).collect();
        if active.is_empty() {
            break;
        }
        let p_refs: Vec<&HalfDensityPair> = active.iter().map(|b| &p[*b]).collect();
        let q = system.apply_batch(&p_refs)?;
        let q_refs: Vec<&SystemTarget> = q.iter().collect();
        let nq = system.adjoint_batch(&q_refs)?;
        for (k, &b) in active.iter().enumerate() {
            let qq = system.target_inner(&q[k], &q[k]).re;
            let pp = system.pair_inner(&p[b], &p[b]).re;
            let denom = qq + system.mu * pp;
            if denom <= 0.0 {
                rr[b] = 0.0;
                continue;
            }
            let alpha = rr[b] / denom;
            g[b].axpy(Complex64::new(alpha, 0.0), &p[b]);
            r[b].axpy(Complex64::new(-alpha, 0.0), &nq[k]);
            r[b].axpy(Complex64::new(-alpha * system.mu, 0.0), &p[b]);
            let rr_new = system.pair_inner(&r[b], &r[b]).re;
            let beta = rr_new / rr[b];
            let mut pn = r[b].clone();
            pn.axpy(Complex64::new(beta, 0.0), &p[b]);
            p[b] = pn;
            rr[b] = rr_new;
            iterations[b] += 1;
        }
    }
    let g_refs: Vec<&HalfDensityPair> = g.iter().collect();
    let ag = system.apply_batch(&g_refs)?;
    let mut out = Vec::with_capacity(n);
    for (b, pair) in g.into_iter().enumerate() {
        let mut d = ag[b].clone();
        d.axpy(Complex64::new(-1.0, 0.0), &targets[b]);
        let bn = targets[b].norm(&system.sgrid)?;
        let misfit = if bn > 0.0 { d.norm(&system.sgrid)? / bn } else { d.norm(&system.sgrid)? };
        let residual = if rhs_norm[b] > 0.0 { rr[b].sqrt() / rhs_norm[b] } else { 0.0 };
        out.push(SolveResult { pair, residual, misfit, iterations: iterations[b], converged: residual <= tol });
    }
    Ok(out)
}

/// (‖λf₊‖ + ‖λf₋‖)/(‖∇φ₀‖ + ‖φ₁‖).
pub fn estimate_ratio(
    pair: &HalfDensityPair,
    data: &InitialData,
    fgrid: &PolarFrequencyGrid,
    sgrid: &SpatialGrid,
) -> Result<f64> {
    let d = data.norm(sgrid)?;
    if d == 0.0 {
        return Err(Error::InvalidArgument("estimate ratio of zero data".into()));
    }
    let (a, b) = pair.norms(fgrid)?;
    Ok((a + b) / d)
}

// ============================================================================
// Flat closed form and evolution
// ============================================================================

struct FlatUnit;

impl Source for FlatUnit {
    fn components(&self) -> usize {
        1
    }
    #[inline]
    fn eval(&self, _ix: usize, x: &Vector3<f64>, _ia: usize, w: &Vector3<f64>, sym: &mut [Complex64]) -> f64 {
        sym[0] = Complex64::new(1.0, 0.0);
        x.dot(w)
    }
}

/// Discrete Fourier transform F(φ)(λω) = (2π)^{−3} Σ_x w_x e^{−iλω·x} φ(x).
pub fn fourier_transform(fields: &[&SpatialField], fgrid: &PolarFrequencyGrid, sgrid: &SpatialGrid) -> Vec<HalfDensity> {
    let inputs: Vec<Vec<&[Complex64]>> = fields.iter().map(|f| vec![f.values.as_slice()]).collect();
    let mut out = synth::adjoint(fgrid, sgrid, &inputs, &FlatUnit, |_| true);
    let c = Complex64::new((2.0 * std::f64::consts::PI).powi(-3), 0.0);
    for d in &mut out {
        d.scale(c);
    }
    out
}

/// Flat solution g± = ½λF(φ₀) ± (i/2)F(φ₁).
pub fn closed_form(data: &InitialData, fgrid: &PolarFrequencyGrid, sgrid: &SpatialGrid) -> HalfDensityPair {
    let ft = fourier_transform(&[&data.phi0, &data.phi1], fgrid, sgrid);
    let lams = fgrid.radial_nodes();
    let a = ft[0].weighted(fgrid, |ir, _| 0.5 * lams[ir]);
    let mut plus = a.clone();
    plus.axpy(0.5 * I, &ft[1]);
    let mut minus = a;
    minus.axpy(-0.5 * I, &ft[1]);
    HalfDensityPair { plus, minus }
}

/// Flat estimate ratio of the closed-form pair for the same data.
pub fn flat_baseline_ratio(data: &InitialData, fgrid: &PolarFrequencyGrid, sgrid: &SpatialGrid) -> Result<f64> {
    estimate_ratio(&closed_form(data, fgrid, sgrid), data, fgrid, sgrid)
}

/// φ(t) = Σ_± ∫ e^{iλ(x·ω ∓ t)} f±(λω) λ² dλ dω at each requested time.
pub fn evolve_flat_times(
    phase: &PhaseField,
    pair: &HalfDensityPair,
    times: &[f64],
    fgrid: &PolarFrequencyGrid,
    sgrid: &SpatialGrid,
) -> Result<Vec<SpatialField>> {
    if !phase.is_flat() {
        return Err(Error::InvalidArgument("evolution is only available for the flat phase".into()));
    }
    pair.plus.check(fgrid)?;
    pair.minus.check(fgrid)?;
    let (fp, fm) = pair.densities(fgrid);
    let lams = fgrid.radial_nodes();
    let dens: Vec<HalfDensity> = times
        .iter()
        .map(|&t| {
            let mut v = Vec::with_capacity(fgrid.len());
            for ia in 0..fgrid.n_angular() {
                for (ir, l) in lams.iter().enumerate() {
                    let e = Complex64::from_polar(1.0, -l * t);
                    v.push(fp.get(ir, ia) * e + fm.get(ir, ia) * e.conj());
                }
            }
            HalfDensity::from_values(fgrid, v).expect("grid layout")
        })
        .collect();
    let refs: Vec<&HalfDensity> = dens.iter().collect();
    let cols = Columns::build(fgrid, &refs, |_, _| 1.0);
    if cols.is_empty() {
        return Ok(vec![SpatialField::zeros(sgrid.len()); times.len()]);
    }
    Ok(synth::forward(fgrid, sgrid, &cols, &FlatUnit).into_iter().map(|mut v| SpatialField { values: v.remove(0) }).collect())
}

pub fn evolve_flat(
    phase: &PhaseField,
    pair: &HalfDensityPair,
    t: f64,
    fgrid: &PolarFrequencyGrid,
    sgrid: &SpatialGrid,
) -> Result<SpatialField> {
    Ok(evolve_flat_times(phase, pair, &[t], fgrid, sgrid)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lagrange_weights_reproduce_polynomials() {
        let g = PolarFrequencyGrid::build(0, 0, 4, 16).unwrap();
        let tab = Tabulation::build(&g, 3.0, 0.4);
        for t in [-2.9, -0.31, 0.0, 0.77, 2.95] {
            let (m0, w) = tab.stencil(t);
            let sum: f64 = w.iter().sum();
            let first: f64 = w.iter().enumerate().map(|(k, l)| l * (tab.t0 + (m0 + k) as f64 * tab.dt)).sum();
            let cube: f64 = w.iter().enumerate().map(|(k, l)| l * (tab.t0 + (m0 + k) as f64 * tab.dt).powi(7)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!((first - t).abs() < 1e-12);
            assert!((cube - t.powi(7)).abs() < 1e-9 * (1.0 + t.abs().powi(7)));
        }
    }
}
