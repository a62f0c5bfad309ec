//! Phase models u(x, ω), their derivative jets, the derived geometry (lapse,
//! normal, second fundamental form), the change of variable φ_ω and a
//! numerical checker for the structural hypotheses on the phase.

use nalgebra::{Matrix2, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dyadic::cutoff_jet;
use crate::error::{Error, Result};
use crate::grid::{mixed_norm_real, tangent_pair, Exponent, PolarFrequencyGrid, SpatialGrid};
use crate::spectral;

// ============================================================================
// Perturbation profile
// ============================================================================

/// One term A·cos(k·s + b·ω + c) of the trigonometric polynomial g(s, ω).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrigTerm {
    pub amplitude: f64,
    pub s_freq: f64,
    pub omega_freq: [f64; 3],
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrigPolynomial {
    pub terms: Vec<TrigTerm>,
}

/// g and its derivatives in s and in the ambient ω variable.
#[derive(Debug, Clone, Copy)]
struct ProfileJet {
    g: f64,
    gs: f64,
    gss: f64,
    gb: Vector3<f64>,
    gbs: Vector3<f64>,
    gbb: Matrix3<f64>,
}

impl TrigPolynomial {
    pub const PRESETS: [&'static str; 2] = ["default", "steep"];

    /// Named profiles. `default` has O(1) amplitudes and frequencies;
    /// `steep` oscillates fast enough in s that large ε folds φ_ω.
    pub fn preset(name: &str) -> Option<Self> {
        let t = |amplitude, s_freq, omega_freq, shift| TrigTerm { amplitude, s_freq, omega_freq, shift };
        match name {
            "default" => Some(Self {
                terms: vec![
                    t(1.0, 1.3, [0.4, 0.0, 0.0], 0.0),
                    t(0.5, 2.1, [0.0, -0.3, 0.7], 0.3),
                    t(0.3, 0.7, [0.2, 0.5, 1.1], 1.2),
                ],
            }),
            "steep" => Some(Self { terms: vec![t(1.0, 4.0, [0.0, 0.0, 0.0], 0.0), t(0.6, 3.0, [0.5, 0.5, 0.0], 0.9)] }),
            _ => None,
        }
    }

    #[inline]
    fn value(&self, s: f64, w: &Vector3<f64>) -> f64 {
        self.terms.iter().map(|t| t.amplitude * (t.s_freq * s + dot3(&t.omega_freq, w) + t.shift).cos()).sum()
    }

    /// (g, g_s, ∇_ω g)
    #[inline]
    fn first(&self, s: f64, w: &Vector3<f64>) -> (f64, f64, Vector3<f64>) {
        let mut out = (0.0, 0.0, Vector3::zeros());
        for t in &self.terms {
            let arg = t.s_freq * s + dot3(&t.omega_freq, w) + t.shift;
            let (sn, cs) = arg.sin_cos();
            out.0 += t.amplitude * cs;
            out.1 -= t.amplitude * t.s_freq * sn;
            out.2 -= Vector3::from(t.omega_freq) * (t.amplitude * sn);
        }
        out
    }

    fn jet(&self, s: f64, w: &Vector3<f64>) -> ProfileJet {
        let mut j = ProfileJet {
            g: 0.0,
            gs: 0.0,
            gss: 0.0,
            gb: Vector3::zeros(),
            gbs: Vector3::zeros(),
            gbb: Matrix3::zeros(),
        };
        for t in &self.terms {
            let b = Vector3::from(t.omega_freq);
            let arg = t.s_freq * s + b.dot(w) + t.shift;
            let (sn, cs) = arg.sin_cos();
            let a = t.amplitude;
            j.g += a * cs;
            j.gs -= a * t.s_freq * sn;
            j.gss -= a * t.s_freq * t.s_freq * cs;
            j.gb -= b * (a * sn);
            j.gbs -= b * (a * t.s_freq * cs);
            j.gbb -= b * b.transpose() * (a * cs);
        }
        j
    }
}

#[inline]
fn dot3(a: &[f64; 3], w: &Vector3<f64>) -> f64 {
    a[0] * w.x + a[1] * w.y + a[2] * w.z
}

// ============================================================================
// Phase field
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseKind {
    Flat,
    Perturbed,
}

/// u(x, ω) = x·ω + ε χ(|x|) g(x·ω, ω); equal to x·ω for |x| ≥ 2.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseField {
    pub kind: PhaseKind,
    pub epsilon: f64,
    pub profile: TrigPolynomial,
}

/// Analytic derivatives of u at one (x, ω).
///
/// ω-derivatives are intrinsic to the sphere and written in ambient
/// coordinates: `domega` is tangent at ω, `domega2` is the covariant Hessian
/// P(∇²_ω u)P − (ω·∇_ω u)P, and `mixed[(m, i)]` = ∂_{x_i}(∂_ω u)_m.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseDerivatives {
    pub u: f64,
    pub grad: Vector3<f64>,
    pub hess: Matrix3<f64>,
    pub domega: Vector3<f64>,
    pub domega2: Matrix3<f64>,
    pub mixed: Matrix3<f64>,
}

/// Geometry of the level surface of u(·, ω) through x.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricJet {
    pub u: f64,
    pub grad_u: Vector3<f64>,
    /// a = |∇u|⁻¹
    pub a: f64,
    /// N = a∇u
    pub normal: Vector3<f64>,
    /// Orthonormal frame of the level surface used for `theta`.
    pub frame: (Vector3<f64>, Vector3<f64>),
    pub theta: Matrix2<f64>,
    pub tr_theta: f64,
    /// ∂_ω u as a tangent vector at ω.
    pub domega_u: Vector3<f64>,
    /// Tangent basis of the sphere at ω.
    pub omega_basis: (Vector3<f64>, Vector3<f64>),
    pub domega2_u: Matrix3<f64>,
}

impl GeometricJet {
    /// ∂_ω u in the tangent basis of the sphere.
    pub fn domega_components(&self) -> [f64; 2] {
        [self.domega_u.dot(&self.omega_basis.0), self.domega_u.dot(&self.omega_basis.1)]
    }
}

/// φ_ω(x) and its Jacobian determinant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordinateChange {
    pub image: Vector3<f64>,
    pub jacobian_det: f64,
    /// |det| < 0.1
    pub degenerate: bool,
}

#[inline]
fn projector(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::identity() - w * w.transpose()
}

impl PhaseField {
    pub fn flat() -> Self {
        Self { kind: PhaseKind::Flat, epsilon: 0.0, profile: TrigPolynomial { terms: Vec::new() } }
    }

    pub fn perturbed(epsilon: f64, profile: TrigPolynomial) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!("epsilon must be ≥ 0, got {epsilon}")));
        }
        Ok(Self { kind: PhaseKind::Perturbed, epsilon, profile })
    }

    /// Perturbed phase with the `default` profile.
    pub fn standard(epsilon: f64) -> Result<Self> {
        Self::perturbed(epsilon, TrigPolynomial::preset("default").expect("preset exists"))
    }

    pub fn is_flat(&self) -> bool {
        self.kind == PhaseKind::Flat || self.epsilon == 0.0 || self.profile.terms.is_empty()
    }

    /// True where u(x,·) = x·ω for every ω.
    #[inline]
    pub fn is_flat_at(&self, x: &Vector3<f64>) -> bool {
        self.is_flat() || x.norm_squared() >= 4.0
    }

    /// Upper bound for |u(x,ω) − x·ω|.
    pub fn perturbation_bound(&self) -> f64 {
        if self.is_flat() {
            return 0.0;
        }
        self.epsilon * self.profile.terms.iter().map(|t| t.amplitude.abs()).sum::<f64>()
    }

    /// Same profile with a different amplitude.
    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self { epsilon, ..self.clone() }
    }

    #[inline]
    pub fn value(&self, x: &Vector3<f64>, w: &Vector3<f64>) -> f64 {
        let s = x.dot(w);
        if self.is_flat() {
            return s;
        }
        let r2 = x.norm_squared();
        if r2 >= 4.0 {
            return s;
        }
        let chi = cutoff_jet(r2.sqrt()).0;
        s + self.epsilon * chi * self.profile.value(s, w)
    }

    /// (u, ∇_x u)
    #[inline]
    pub fn first_order(&self, x: &Vector3<f64>, w: &Vector3<f64>) -> (f64, Vector3<f64>) {
        let s = x.dot(w);
        if self.is_flat() || x.norm_squared() >= 4.0 {
            return (s, *w);
        }
        let r = x.norm();
        let (chi, dchi, _) = cutoff_jet(r);
        let (g, gs, _) = self.profile.first(s, w);
        let mut grad = w + w * (self.epsilon * chi * gs);
        if dchi != 0.0 {
            grad += x * (self.epsilon * dchi * g / r);
        }
        (s + self.epsilon * chi * g, grad)
    }

    /// (u, a, N) with a = |∇u|⁻¹ and N = a∇u.
    #[inline]
    pub fn lapse_normal(&self, x: &Vector3<f64>, w: &Vector3<f64>) -> (f64, f64, Vector3<f64>) {
        if self.is_flat() || x.norm_squared() >= 4.0 {
            return (x.dot(w), 1.0, *w);
        }
        let (u, grad) = self.first_order(x, w);
        let a = 1.0 / grad.norm();
        (u, a, grad * a)
    }

    pub fn derivatives(&self, x: &Vector3<f64>, w: &Vector3<f64>) -> PhaseDerivatives {
        let s = x.dot(w);
        let p = projector(w);
        let flat = PhaseDerivatives {
            u: s,
            grad: *w,
            hess: Matrix3::zeros(),
            domega: x - w * s,
            domega2: p * (-s),
            mixed: p,
        };
        if self.is_flat() {
            return flat;
        }
        let r = x.norm();
        let (chi, dchi, ddchi) = cutoff_jet(r);
        if chi == 0.0 && dchi == 0.0 && ddchi == 0.0 {
            return flat;
        }
        let eps = self.epsilon;
        let pj = self.profile.jet(s, w);
        let xh = if r > 0.0 { x / r } else { Vector3::zeros() };

        let u = s + eps * chi * pj.g;
        let grad = w + (xh * (dchi * pj.g) + w * (chi * pj.gs)) * eps;
        let mut hess_p = w * w.transpose() * (chi * pj.gss);
        if dchi != 0.0 || ddchi != 0.0 {
            let radial = xh * xh.transpose();
            hess_p += (radial * ddchi + (Matrix3::identity() - radial) * (dchi / r)) * pj.g;
            hess_p += (xh * w.transpose() + w * xh.transpose()) * (dchi * pj.gs);
        }
        let hess = hess_p * eps;

        let amb_grad = x + (x * pj.gs + pj.gb) * (eps * chi);
        let amb_hess = (x * x.transpose() * pj.gss + x * pj.gbs.transpose() + pj.gbs * x.transpose() + pj.gbb) * (eps * chi);
        let domega = p * amb_grad;
        let domega2 = p * amb_hess * p - p * w.dot(&amb_grad);

        // d/dx_i of the ambient ω-gradient of the perturbation, row m.
        let inner = x * pj.gs + pj.gb;
        let mut mx = (x * w.transpose() * pj.gss + Matrix3::identity() * pj.gs + pj.gbs * w.transpose()) * chi;
        if dchi != 0.0 {
            mx += inner * xh.transpose() * dchi;
        }
        let mixed = p * (Matrix3::identity() + mx * eps);
        PhaseDerivatives { u, grad, hess, domega, domega2, mixed }
    }

    pub fn jet(&self, x: &Vector3<f64>, w: &Vector3<f64>) -> Result<GeometricJet> {
        let d = self.derivatives(x, w);
        let gnorm = d.grad.norm();
        if gnorm < 1e-6 {
            return Err(Error::DegenerateGradient(gnorm));
        }
        let a = 1.0 / gnorm;
        let normal = d.grad * a;
        let frame = tangent_pair(&normal);
        let t = |p: &Vector3<f64>, q: &Vector3<f64>| a * p.dot(&(d.hess * q));
        let theta = Matrix2::new(t(&frame.0, &frame.0), t(&frame.0, &frame.1), t(&frame.1, &frame.0), t(&frame.1, &frame.1));
        Ok(GeometricJet {
            u: d.u,
            grad_u: d.grad,
            a,
            normal,
            frame,
            theta,
            tr_theta: theta[(0, 0)] + theta[(1, 1)],
            domega_u: d.domega,
            omega_basis: tangent_pair(w),
            domega2_u: d.domega2,
        })
    }

    /// φ_ω(x) = u(x,ω)ω + ∂_ω u(x,ω).
    pub fn change_of_variable(&self, w: &Vector3<f64>, x: &Vector3<f64>) -> CoordinateChange {
        if self.is_flat() || x.norm_squared() >= 4.0 {
            return CoordinateChange { image: *x, jacobian_det: 1.0, degenerate: false };
        }
        let d = self.derivatives(x, w);
        let jac = w * d.grad.transpose() + d.mixed;
        let det = jac.determinant();
        CoordinateChange { image: w * d.u + d.domega, jacobian_det: det, degenerate: det.abs() < 0.1 }
    }

    /// ∇a = −a² (∇²u) N
    pub fn lapse_gradient(&self, x: &Vector3<f64>, w: &Vector3<f64>) -> Vector3<f64> {
        let d = self.derivatives(x, w);
        let a = 1.0 / d.grad.norm();
        -(d.hess * d.grad) * (a * a * a)
    }

    /// θ as the ambient tensor a·P_N ∇²u P_N (frame independent).
    pub fn theta_ambient(&self, x: &Vector3<f64>, w: &Vector3<f64>) -> Matrix3<f64> {
        let d = self.derivatives(x, w);
        let a = 1.0 / d.grad.norm();
        let pn = projector(&(d.grad * a));
        pn * d.hess * pn * a
    }

    /// ∂_ω a as a tangent vector at ω: −a² (mixed · N).
    pub fn lapse_domega(&self, x: &Vector3<f64>, w: &Vector3<f64>) -> Vector3<f64> {
        let d = self.derivatives(x, w);
        let a = 1.0 / d.grad.norm();
        -(d.mixed * d.grad) * (a * a * a)
    }
}

/// Point at angle t along the great circle through ω with tangent e.
#[inline]
pub fn geodesic(w: &Vector3<f64>, e: &Vector3<f64>, t: f64) -> Vector3<f64> {
    w * t.cos() + e * t.sin()
}

// ============================================================================
// Assumption checker
// ============================================================================

/// What a measured quantity is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    /// measured ≲ ε
    Epsilon,
    /// measured ≲ 1
    Unit,
    /// measured ≥ the given floor
    AtLeast(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionItem {
    pub assumption: u8,
    pub label: String,
    pub norm: String,
    pub measured: f64,
    pub bound: Bound,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub epsilon: f64,
    pub slack: f64,
    pub items: Vec<AssumptionItem>,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(|i| i.pass)
    }
    pub fn item(&self, label: &str) -> Option<&AssumptionItem> {
        self.items.iter().find(|i| i.label == label)
    }
}

/// Absolute allowance for rounding in ε-bounded items.
const ROUNDOFF_FLOOR: f64 = 1e-9;
const FD_X: f64 = 1e-4;
const FD_OMEGA: f64 = 1e-3;
const FD_NESTED: f64 = 1e-3;

/// Options for `check_assumptions`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    /// Pass threshold multiplier on the target bound.
    pub slack: f64,
    /// Number of directions sampled from the frequency grid.
    pub directions: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { slack: 20.0, directions: 8 }
    }
}

fn central_x<T, F>(x: &Vector3<f64>, h: f64, f: F) -> [T; 3]
where
    F: Fn(&Vector3<f64>) -> T,
    T: std::ops::Sub<Output = T> + std::ops::Mul<f64, Output = T>,
{
    let d = |k: usize| {
        let mut e = Vector3::zeros();
        e[k] = h;
        (f(&(x + e)) - f(&(x - e))) * (0.5 / h)
    };
    [d(0), d(1), d(2)]
}

fn central_omega<T, F>(w: &Vector3<f64>, e: &Vector3<f64>, h: f64, f: F) -> T
where
    F: Fn(&Vector3<f64>) -> T,
    T: std::ops::Sub<Output = T> + std::ops::Mul<f64, Output = T>,
{
    (f(&geodesic(w, e, h)) - f(&geodesic(w, e, -h))) * (0.5 / h)
}

#[derive(Debug, Clone, Default)]
struct DirectionStats {
    values: std::collections::BTreeMap<&'static str, f64>,
}

impl DirectionStats {
    fn max(&mut self, key: &'static str, v: f64) {
        let e = self.values.entry(key).or_insert(0.0);
        if v > *e || v.is_nan() {
            *e = v;
        }
    }
    fn min(&mut self, key: &'static str, v: f64) {
        let e = self.values.entry(key).or_insert(f64::INFINITY);
        if v < *e {
            *e = v;
        }
    }
}

fn l2(values: &[f64], weights: &[f64]) -> f64 {
    let sq: Vec<f64> = values.iter().zip(weights).map(|(v, w)| v * v * w).collect();
    crate::grid::pairwise_sum(&sq).sqrt()
}

fn sample_directions(fgrid: &PolarFrequencyGrid, count: usize) -> Vec<Vector3<f64>> {
    let n = fgrid.n_angular();
    let count = count.clamp(1, n);
    (0..count).map(|i| fgrid.angular_nodes()[(i * n) / count + (n / count) / 2]).collect()
}

fn measure_direction(phase: &PhaseField, sgrid: &SpatialGrid, w: &Vector3<f64>) -> DirectionStats {
    let mut st = DirectionStats::default();
    let pts = sgrid.points();
    let wts = sgrid.weights();
    let slab = sgrid.default_slab_width();
    let (e1, e2) = tangent_pair(w);
    let frob = |m: &Matrix3<f64>| m.norm();

    // Assumption 1
    let grad_a: Vec<Vector3<f64>> = pts.iter().map(|x| phase.lapse_gradient(x, w)).collect();
    let mag: Vec<f64> = grad_a.iter().map(|g| g.norm()).collect();
    st.max("grad_a", mixed_norm_real(&mag, sgrid, phase, w, Exponent::Infinity, Exponent::Two, slab).unwrap_or(f64::NAN));
    for x in pts {
        let (_, a, _) = phase.lapse_normal(x, w);
        st.max("a_minus_one", (a - 1.0).abs());
    }
    let tan_hess_a: Vec<f64> = pts
        .iter()
        .map(|x| {
            let cols = central_x(x, FD_X, |y| phase.lapse_gradient(y, w));
            let d2 = Matrix3::from_columns(&cols);
            let (_, _, n) = phase.lapse_normal(x, w);
            frob(&(projector(&n) * d2))
        })
        .collect();
    st.max("tan_grad_grad_a", l2(&tan_hess_a, wts));
    let theta: Vec<f64> = pts.iter().map(|x| frob(&phase.theta_ambient(x, w))).collect();
    st.max("theta", mixed_norm_real(&theta, sgrid, phase, w, Exponent::Infinity, Exponent::Two, slab).unwrap_or(f64::NAN));
    let grad_theta: Vec<f64> = pts
        .iter()
        .map(|x| {
            let d = central_x(x, FD_X, |y| phase.theta_ambient(y, w));
            (d[0].norm_squared() + d[1].norm_squared() + d[2].norm_squared()).sqrt()
        })
        .collect();
    st.max("grad_theta", l2(&grad_theta, wts));

    // Assumption 2
    let da: Vec<f64> = pts.iter().map(|x| phase.lapse_domega(x, w).norm()).collect();
    st.max("domega_a", l2(&da, wts));
    let grad_da: Vec<f64> = pts
        .iter()
        .map(|x| {
            let d = central_x(x, FD_X, |y| phase.lapse_domega(y, w));
            Matrix3::from_columns(&d).norm()
        })
        .collect();
    st.max("grad_domega_a", l2(&grad_da, wts));
    let dtheta = |y: &Vector3<f64>| -> [Matrix3<f64>; 2] {
        [
            central_omega(w, &e1, FD_OMEGA, |v| phase.theta_ambient(y, v)),
            central_omega(w, &e2, FD_OMEGA, |v| phase.theta_ambient(y, v)),
        ]
    };
    let dtheta_mag: Vec<f64> = pts
        .iter()
        .map(|x| {
            let d = dtheta(x);
            (d[0].norm_squared() + d[1].norm_squared()).sqrt()
        })
        .collect();
    st.max("domega_theta", l2(&dtheta_mag, wts));
    let grad_dtheta: Vec<f64> = pts
        .iter()
        .map(|x| {
            let mut s = 0.0;
            for k in 0..3 {
                let mut e = Vector3::zeros();
                e[k] = FD_NESTED;
                let (p, m) = (dtheta(&(x + e)), dtheta(&(x - e)));
                for c in 0..2 {
                    s += ((p[c] - m[c]) / (2.0 * FD_NESTED)).norm_squared();
                }
            }
            s.sqrt()
        })
        .collect();
    st.max("grad_domega_theta", l2(&grad_dtheta, wts));
    for x in pts {
        // Hölder quotient of a in ω with exponent 1/2.
        let (_, a0, n0) = phase.lapse_normal(x, w);
        for &t in &[0.01, 0.05, 0.2] {
            for e in [&e1, &e2] {
                let v = geodesic(w, e, t);
                let (_, a1, n1) = phase.lapse_normal(x, &v);
                let dw = (v - w).norm();
                st.max("holder_a", (a1 - a0).abs() / dw.sqrt());
                st.max("bilipschitz", ((n1 - n0).norm() - dw).abs() / dw);
            }
        }
        // Operator norm of ∂_ω N on the tangent plane.
        let dn1 = central_omega(w, &e1, FD_OMEGA, |v| phase.lapse_normal(x, v).2);
        let dn2 = central_omega(w, &e2, FD_OMEGA, |v| phase.lapse_normal(x, v).2);
        let gram = Matrix2::new(dn1.dot(&dn1), dn1.dot(&dn2), dn2.dot(&dn1), dn2.dot(&dn2));
        let top = gram.symmetric_eigenvalues().max();
        st.max("domega_n", top.max(0.0).sqrt());
        let _ = n0;
    }
    let second_n = |y: &Vector3<f64>| -> [Vector3<f64>; 3] {
        let diag = (e1 + e2).normalize();
        let h = FD_OMEGA;
        let dd = |e: &Vector3<f64>| {
            (phase.lapse_normal(y, &geodesic(w, e, h)).2 + phase.lapse_normal(y, &geodesic(w, e, -h)).2
                - phase.lapse_normal(y, w).2 * 2.0)
                / (h * h)
        };
        [dd(&e1), dd(&e2), dd(&diag)]
    };
    let grad_d2n: Vec<f64> = pts
        .iter()
        .map(|x| {
            let mut s = 0.0;
            for k in 0..3 {
                let mut e = Vector3::zeros();
                e[k] = FD_NESTED;
                let (p, m) = (second_n(&(x + e)), second_n(&(x - e)));
                for c in 0..3 {
                    s += ((p[c] - m[c]) / (2.0 * FD_NESTED)).norm_squared();
                }
            }
            s.sqrt()
        })
        .collect();
    st.max("grad_domega2_n", l2(&grad_d2n, wts));
    for x in pts.iter().filter(|x| x.norm() <= 2.0) {
        let mut s = 0.0;
        for e in [&e1, &e2] {
            let f = w.cross(e);
            let comp = |t: f64| {
                let v = geodesic(w, e, t);
                let et = geodesic(e, &(-w), t);
                let h2 = phase.derivatives(x, &v).domega2;
                [et.dot(&(h2 * et)), et.dot(&(h2 * f)), f.dot(&(h2 * f))]
            };
            let (p, m) = (comp(FD_OMEGA), comp(-FD_OMEGA));
            let wts3 = [1.0, 2.0, 1.0];
            for c in 0..3 {
                s += wts3[c] * ((p[c] - m[c]) / (2.0 * FD_OMEGA)).powi(2);
            }
        }
        st.max("domega3_u", s.sqrt());
    }

    // Assumption 4
    let dets: Vec<f64> = pts.iter().map(|x| phase.change_of_variable(w, x).jacobian_det).collect();
    let any_neg = dets.iter().any(|d| *d < 0.0);
    let any_pos = dets.iter().any(|d| *d > 0.0);
    for d in &dets {
        st.max("det_minus_one", (d.abs() - 1.0).abs());
        st.min("min_det", if any_neg && any_pos { 0.0 } else { d.abs() });
    }

    // Assumption 5
    for x in pts.iter().filter(|x| x.norm() < 2.0) {
        let d = phase.derivatives(x, w);
        for &t in &[0.02, 0.05, 0.1, 0.2] {
            for e in [&e1, &e2] {
                let nu = geodesic(w, e, t);
                let phi = phase.change_of_variable(&nu, x).image;
                let dw = (w - nu).norm();
                let p = projector(w);
                st.max("linear_u", (d.u - phi.dot(w)).abs() / (dw * dw));
                st.max("linear_domega_u", (d.domega - p * phi).norm() / dw);
                st.max("linear_domega2_u", (d.domega2 + p * phi.dot(w)).norm());
            }
        }
    }

    // Assumption 6
    for x in pts {
        let n_plus = phase.lapse_normal(x, w).2;
        let n_minus = phase.lapse_normal(x, &(-w)).2;
        st.max("antipodal_n", (n_plus + n_minus).norm());
    }

    // Assumption 3 needs the lattice FFT.
    if let Some(lat) = sgrid.lattice_info() {
        let fa: Vec<f64> = pts
            .iter()
            .zip(&grad_a)
            .map(|(x, g)| phase.lapse_normal(x, w).2.dot(g))
            .collect();
        let h = lat.spacing();
        let nyquist = std::f64::consts::PI / h;
        let mut j = 0;
        while 2f64.powi(j + 1) <= nyquist {
            let scale = 2f64.powi(j);
            let field: Vec<num_complex::Complex64> = fa.iter().map(|v| num_complex::Complex64::new(*v, 0.0)).collect();
            let low = spectral::radial_filter(&field, lat, |k| crate::dyadic::cutoff(k / scale));
            let a2: Vec<f64> = low.iter().map(|v| v.re).collect();
            let a1: Vec<f64> = fa.iter().zip(&a2).map(|(f, l)| f - l).collect();
            let grad_low = spectral::gradient(&low, lat);
            let dn_a2: Vec<f64> = pts
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let n = phase.lapse_normal(x, w).2;
                    (n.x * grad_low[0][i].re + n.y * grad_low[1][i].re + n.z * grad_low[2][i].re).abs()
                })
                .collect();
            let abs_a2: Vec<f64> = a2.iter().map(|v| v.abs()).collect();
            let m1 = scale.sqrt() * l2(&a1, wts);
            let m2 = mixed_norm_real(&abs_a2, sgrid, phase, w, Exponent::Infinity, Exponent::Two, slab).unwrap_or(f64::NAN);
            let m3 = (l2(&dn_a2, wts)
                + mixed_norm_real(&abs_a2, sgrid, phase, w, Exponent::Two, Exponent::Infinity, slab).unwrap_or(f64::NAN))
                / scale.sqrt();
            st.max("split_high", m1);
            st.max("split_low", m2);
            st.max("split_low_derivative", m3);
            j += 1;
        }
    }
    st
}

/// Measures the quantities entering the structural hypotheses on the phase.
///
/// ε-bounded items pass when measured ≤ slack·ε (plus a rounding floor);
/// O(1) items pass when measured ≤ slack.
pub fn check_assumptions(
    phase: &PhaseField,
    fgrid: &PolarFrequencyGrid,
    sgrid: &SpatialGrid,
    epsilon: f64,
    options: CheckOptions,
) -> AssumptionReport {
    let dirs = sample_directions(fgrid, options.directions);
    let per_dir: Vec<DirectionStats> = dirs.par_iter().map(|w| measure_direction(phase, sgrid, w)).collect();
    let mut merged: std::collections::BTreeMap<&'static str, f64> = Default::default();
    for st in &per_dir {
        for (k, v) in &st.values {
            let e = merged.entry(k).or_insert(if *k == "min_det" { f64::INFINITY } else { 0.0 });
            if *k == "min_det" {
                *e = e.min(*v);
            } else if *v > *e || v.is_nan() {
                *e = *v;
            }
        }
    }
    let spec: [(u8, &str, &str, Bound); 22] = [
        (1, "grad_a", "‖∇a‖ in L^∞_u L²(P_u)", Bound::Epsilon),
        (1, "a_minus_one", "‖a − 1‖ in L^∞", Bound::Epsilon),
        (1, "tan_grad_grad_a", "‖∇̸∇a‖ in L²", Bound::Epsilon),
        (1, "theta", "‖θ‖ in L^∞_u L²(P_u)", Bound::Epsilon),
        (1, "grad_theta", "‖∇θ‖ in L²", Bound::Epsilon),
        (2, "domega_a", "‖∂_ω a‖ in L²", Bound::Epsilon),
        (2, "grad_domega_a", "‖∇∂_ω a‖ in L²", Bound::Epsilon),
        (2, "domega_theta", "‖∂_ω θ‖ in L²", Bound::Epsilon),
        (2, "grad_domega_theta", "‖∇∂_ω θ‖ in L²", Bound::Epsilon),
        (2, "holder_a", "sup |a(ω)−a(ω′)|/|ω−ω′|^{1/2}", Bound::Unit),
        (2, "domega_n", "‖∂_ω N‖ in L^∞", Bound::Unit),
        (2, "bilipschitz", "sup ||N−N′| − |ω−ω′|| / |ω−ω′|", Bound::Epsilon),
        (2, "grad_domega2_n", "‖∇∂²_ω N‖ in L²", Bound::Epsilon),
        (2, "domega3_u", "‖∂³_ω u‖ in L^∞(|x| ≤ 2)", Bound::Unit),
        (3, "split_high", "sup_j 2^{j/2}‖a₁^j‖ in L²", Bound::Epsilon),
        (3, "split_low", "sup_j ‖a₂^j‖ in L^∞_u L²(P_u)", Bound::Epsilon),
        (3, "split_low_derivative", "sup_j 2^{−j/2}(‖∇_N a₂^j‖_{L²} + ‖a₂^j‖_{L²_u L^∞})", Bound::Epsilon),
        (4, "det_minus_one", "‖|det Jac φ_ω| − 1‖ in L^∞", Bound::Epsilon),
        (4, "min_det", "min |det Jac φ_ω| (0 when the sign changes)", Bound::AtLeast(0.1)),
        (5, "linear_u", "sup |u(x,ω) − φ_ν(x)·ω| / |ω−ν|²", Bound::Epsilon),
        (5, "linear_domega_u", "sup |∂_ω u − ∂_ω(φ_ν·ω)| / |ω−ν|", Bound::Epsilon),
        (5, "linear_domega2_u", "sup |∂²_ω u − ∂²_ω(φ_ν·ω)|", Bound::Epsilon),
    ];
    let mut items = Vec::new();
    for (assumption, label, norm, bound) in spec {
        let Some(&measured) = merged.get(label) else { continue };
        let pass = match bound {
            Bound::Epsilon => measured <= options.slack * epsilon + ROUNDOFF_FLOOR,
            Bound::Unit => measured <= options.slack,
            Bound::AtLeast(floor) => measured >= floor,
        };
        items.push(AssumptionItem { assumption, label: label.into(), norm: norm.into(), measured, bound, pass });
    }
    if let Some(&measured) = merged.get("antipodal_n") {
        items.push(AssumptionItem {
            assumption: 6,
            label: "antipodal_n".into(),
            norm: "sup |N(x,ω) + N(x,−ω)|".into(),
            measured,
            bound: Bound::Epsilon,
            pass: measured <= options.slack * epsilon + ROUNDOFF_FLOOR,
        });
    }
    AssumptionReport { epsilon, slack: options.slack, items }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_jet_is_trivial() {
        let p = PhaseField::flat();
        let w = Vector3::new(0.3, -0.4, 0.5).normalize();
        let j = p.jet(&Vector3::new(1.0, 2.0, -0.5), &w).unwrap();
        assert!((j.a - 1.0).abs() < 1e-15);
        assert!((j.normal - w).norm() < 1e-15);
        assert_eq!(j.theta, Matrix2::zeros());
    }

    #[test]
    fn presets_exist() {
        for name in TrigPolynomial::PRESETS {
            assert!(TrigPolynomial::preset(name).is_some());
        }
        assert!(TrigPolynomial::preset("nope").is_none());
    }
}
