//! Quadrature grids on frequency space (polar coordinates) and on space,
//! the fields that live on them, and their norms.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;
use nalgebra::Vector3;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::phase::PhaseField;

// ============================================================================
// Summation
// ============================================================================

/// Pairwise summation with a fixed split, so results do not depend on thread
/// count.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 128;
    if values.len() <= LEAF {
        let mut s = 0.0;
        for v in values {
            s += v;
        }
        return s;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn pairwise_sum_complex(values: &[Complex64]) -> Complex64 {
    const LEAF: usize = 128;
    if values.len() <= LEAF {
        let mut s = Complex64::new(0.0, 0.0);
        for v in values {
            s += v;
        }
        return s;
    }
    let mid = values.len() / 2;
    pairwise_sum_complex(&values[..mid]) + pairwise_sum_complex(&values[mid..])
}

// ============================================================================
// Frequency grid
// ============================================================================

/// Log-spaced nodes on [a, b] with trapezoid weights in the variable ln λ,
/// returned as weights for dλ.
pub fn log_trapezoid(a: f64, b: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 2 && a > 0.0 && b > a);
    let (la, lb) = (a.ln(), b.ln());
    let h = (lb - la) / (n - 1) as f64;
    let nodes: Vec<f64> = (0..n)
        .map(|i| if i == n - 1 { b } else if i == 0 { a } else { (la + h * i as f64).exp() })
        .collect();
    let weights = nodes
        .iter()
        .enumerate()
        .map(|(i, l)| if i == 0 || i == n - 1 { 0.5 * h * l } else { h * l })
        .collect();
    (nodes, weights)
}

/// Fibonacci-sphere points with equal weights 4π/n.
pub fn fibonacci_sphere(n: usize) -> Vec<Vector3<f64>> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as f64 / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolarFrequencyGrid {
    radial_nodes: Vec<f64>,
    radial_weights: Vec<f64>,
    angular_nodes: Vec<Vector3<f64>>,
    angular_weights: Vec<f64>,
    j_range: (i32, i32),
}

impl PolarFrequencyGrid {
    /// Radial nodes log-spaced over [2^{j_min−1}, 2^{j_max+1}], Fibonacci
    /// angular nodes.
    pub fn build(j_min: i32, j_max: i32, radial_per_octave: usize, angular_count: usize) -> Result<Self> {
        if j_min > j_max {
            return Err(Error::InvalidArgument(format!("j_min {j_min} exceeds j_max {j_max}")));
        }
        if radial_per_octave < 4 {
            return Err(Error::InvalidArgument(format!("radial_per_octave {radial_per_octave} < 4")));
        }
        if angular_count < 16 {
            return Err(Error::InvalidArgument(format!("angular_count {angular_count} < 16")));
        }
        let n_r = (j_max - j_min + 1) as usize * radial_per_octave;
        let (radial_nodes, radial_weights) =
            log_trapezoid(2f64.powi(j_min - 1), 2f64.powi(j_max + 1), n_r);
        let angular_nodes = fibonacci_sphere(angular_count);
        let angular_weights = vec![4.0 * PI / angular_count as f64; angular_count];
        Ok(Self { radial_nodes, radial_weights, angular_nodes, angular_weights, j_range: (j_min, j_max) })
    }

    /// Grid from explicit nodes; used for reference quadratures.
    pub fn from_parts(
        radial_nodes: Vec<f64>,
        radial_weights: Vec<f64>,
        angular_nodes: Vec<Vector3<f64>>,
        angular_weights: Vec<f64>,
        j_range: (i32, i32),
    ) -> Result<Self> {
        if radial_nodes.len() != radial_weights.len() {
            return Err(Error::ShapeMismatch { expected: radial_nodes.len(), got: radial_weights.len() });
        }
        if angular_nodes.len() != angular_weights.len() {
            return Err(Error::ShapeMismatch { expected: angular_nodes.len(), got: angular_weights.len() });
        }
        if radial_nodes.is_empty() || angular_nodes.is_empty() {
            return Err(Error::EmptyGrid);
        }
        if radial_nodes.iter().any(|l| !(*l > 0.0)) || radial_weights.iter().chain(&angular_weights).any(|w| !(*w > 0.0)) {
            return Err(Error::InvalidArgument("nodes and weights must be positive".into()));
        }
        Ok(Self { radial_nodes, radial_weights, angular_nodes, angular_weights, j_range })
    }

    pub fn radial_nodes(&self) -> &[f64] {
        &self.radial_nodes
    }
    pub fn radial_weights(&self) -> &[f64] {
        &self.radial_weights
    }
    pub fn angular_nodes(&self) -> &[Vector3<f64>] {
        &self.angular_nodes
    }
    pub fn angular_weights(&self) -> &[f64] {
        &self.angular_weights
    }
    pub fn j_range(&self) -> (i32, i32) {
        self.j_range
    }
    pub fn n_radial(&self) -> usize {
        self.radial_nodes.len()
    }
    pub fn n_angular(&self) -> usize {
        self.angular_nodes.len()
    }
    pub fn len(&self) -> usize {
        self.n_radial() * self.n_angular()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// λ² w_λ w_ω at (radial index, angular index).
    #[inline]
    pub fn measure(&self, ir: usize, ia: usize) -> f64 {
        let l = self.radial_nodes[ir];
        l * l * self.radial_weights[ir] * self.angular_weights[ia]
    }

    /// The frequency vector λω at a node.
    pub fn xi(&self, ir: usize, ia: usize) -> Vector3<f64> {
        self.angular_nodes[ia] * self.radial_nodes[ir]
    }

    /// Same layout with radial_per_octave and angular_count doubled.
    pub fn refined(&self) -> Result<Self> {
        let (j0, j1) = self.j_range;
        let rpo = self.n_radial() / (j1 - j0 + 1) as usize;
        Self::build(j0, j1, 2 * rpo, 2 * self.n_angular())
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.radial_nodes.iter().chain(&self.radial_weights).chain(&self.angular_weights) {
            h.update(v.to_le_bytes());
        }
        for w in &self.angular_nodes {
            for c in w.iter() {
                h.update(c.to_le_bytes());
            }
        }
        short_hex(&h.finalize())
    }
}

fn short_hex(bytes: &[u8]) -> String {
    bytes.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

// ============================================================================
// Spatial grid
// ============================================================================

/// Cell-centered cubic lattice on [−L, L]³ with n points per axis; point
/// (i, j, k) has flat index (i·n + j)·n + k.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lattice {
    pub half_width: f64,
    pub n: usize,
}

impl Lattice {
    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / self.n as f64
    }
    pub fn coordinate(&self, i: usize) -> f64 {
        -self.half_width + (i as f64 + 0.5) * self.spacing()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    points: Vec<Vector3<f64>>,
    weights: Vec<f64>,
    bounding_radius: f64,
    lattice: Option<Lattice>,
}

impl SpatialGrid {
    pub fn lattice(half_width: f64, n: usize) -> Result<Self> {
        if !(half_width > 0.0) || n == 0 {
            return Err(Error::InvalidArgument(format!("lattice needs L > 0 and n > 0, got L={half_width}, n={n}")));
        }
        let lat = Lattice { half_width, n };
        let h = lat.spacing();
        let mut points = Vec::with_capacity(n * n * n);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    points.push(Vector3::new(lat.coordinate(i), lat.coordinate(j), lat.coordinate(k)));
                }
            }
        }
        let weights = vec![h * h * h; points.len()];
        let mut g = Self::from_points(points, weights)?;
        g.lattice = Some(lat);
        Ok(g)
    }

    /// Gauss–Legendre in the radius times a Fibonacci sphere.
    pub fn ball(radius: f64, n_radial: usize, n_angular: usize) -> Result<Self> {
        let nr = NonZeroUsize::new(n_radial).ok_or(Error::EmptyGrid)?;
        if n_angular == 0 || !(radius > 0.0) {
            return Err(Error::InvalidArgument("ball needs a positive radius and angular count".into()));
        }
        let gl = GaussLegendre::new(nr);
        let dirs = fibonacci_sphere(n_angular);
        let wa = 4.0 * PI / n_angular as f64;
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for &(t, w) in gl.as_node_weight_pairs() {
            let r = 0.5 * radius * (t + 1.0);
            let wr = 0.5 * radius * w * r * r;
            for d in &dirs {
                points.push(d * r);
                weights.push(wr * wa);
            }
        }
        Self::from_points(points, weights)
    }

    /// Box aligned with `axis`: `n_long` points over [−half_long, half_long]
    /// along the axis and `n_trans`² points over the transverse square.
    pub fn oriented_box(
        center: Vector3<f64>,
        axis: Vector3<f64>,
        half_long: f64,
        half_trans: f64,
        n_long: usize,
        n_trans: usize,
    ) -> Result<Self> {
        if n_long == 0 || n_trans == 0 {
            return Err(Error::EmptyGrid);
        }
        let (e1, e2) = tangent_pair(&axis);
        let hl = 2.0 * half_long / n_long as f64;
        let ht = 2.0 * half_trans / n_trans as f64;
        let mut points = Vec::with_capacity(n_long * n_trans * n_trans);
        for i in 0..n_long {
            let s = -half_long + (i as f64 + 0.5) * hl;
            for j in 0..n_trans {
                let p = -half_trans + (j as f64 + 0.5) * ht;
                for k in 0..n_trans {
                    let q = -half_trans + (k as f64 + 0.5) * ht;
                    points.push(center + axis * s + e1 * p + e2 * q);
                }
            }
        }
        let weights = vec![hl * ht * ht; points.len()];
        Self::from_points(points, weights)
    }

    pub fn from_points(points: Vec<Vector3<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.len() != weights.len() {
            return Err(Error::ShapeMismatch { expected: points.len(), got: weights.len() });
        }
        if points.is_empty() {
            return Err(Error::EmptyGrid);
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::InvalidArgument("spatial weights must be positive".into()));
        }
        let bounding_radius = points.iter().map(|p| p.norm()).fold(0.0, f64::max);
        Ok(Self { points, weights, bounding_radius, lattice: None })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn bounding_radius(&self) -> f64 {
        self.bounding_radius
    }
    pub fn lattice_info(&self) -> Option<Lattice> {
        self.lattice
    }
    pub fn len(&self) -> usize {
        self.points.len()
    }
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
    pub fn volume(&self) -> f64 {
        pairwise_sum(&self.weights)
    }

    /// Default slab width for mixed norms: two lattice spacings, or twice the
    /// mean point spacing for scattered grids.
    pub fn default_slab_width(&self) -> f64 {
        match self.lattice {
            Some(l) => 2.0 * l.spacing(),
            None => 2.0 * (self.volume() / self.len() as f64).cbrt(),
        }
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (p, w) in self.points.iter().zip(&self.weights) {
            for c in p.iter() {
                h.update(c.to_le_bytes());
            }
            h.update(w.to_le_bytes());
        }
        short_hex(&h.finalize())
    }
}

/// Deterministic orthonormal pair spanning the plane orthogonal to `n`:
/// Gram–Schmidt of e₁ (or e₂ when n is nearly parallel to e₁) against n.
pub fn tangent_pair(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let n = n.normalize();
    let seed = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = (seed - n * n.dot(&seed)).normalize();
    let e2 = n.cross(&e1);
    (e1, e2)
}

// ============================================================================
// Fields
// ============================================================================

/// Density sampled on a polar grid. Storage is angular-major: the value at
/// (radial ir, angular ia) sits at `ia·n_radial + ir`.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfDensity {
    values: Vec<Complex64>,
    n_radial: usize,
    n_angular: usize,
}

impl HalfDensity {
    pub fn zeros(grid: &PolarFrequencyGrid) -> Self {
        Self { values: vec![Complex64::new(0.0, 0.0); grid.len()], n_radial: grid.n_radial(), n_angular: grid.n_angular() }
    }

    pub fn from_fn(grid: &PolarFrequencyGrid, f: impl Fn(f64, &Vector3<f64>) -> Complex64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for w in grid.angular_nodes() {
            for &l in grid.radial_nodes() {
                values.push(f(l, w));
            }
        }
        Self { values, n_radial: grid.n_radial(), n_angular: grid.n_angular() }
    }

    pub fn from_values(grid: &PolarFrequencyGrid, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::ShapeMismatch { expected: grid.len(), got: values.len() });
        }
        Ok(Self { values, n_radial: grid.n_radial(), n_angular: grid.n_angular() })
    }

    #[inline]
    pub fn get(&self, ir: usize, ia: usize) -> Complex64 {
        self.values[ia * self.n_radial + ir]
    }
    #[inline]
    pub fn set(&mut self, ir: usize, ia: usize, v: Complex64) {
        self.values[ia * self.n_radial + ir] = v;
    }
    pub fn values(&self) -> &[Complex64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.n_radial, self.n_angular)
    }

    pub fn check(&self, grid: &PolarFrequencyGrid) -> Result<()> {
        if self.n_radial != grid.n_radial() || self.n_angular != grid.n_angular() {
            return Err(Error::ShapeMismatch { expected: grid.len(), got: self.values.len() });
        }
        Ok(())
    }

    /// Pointwise product with a real weight w(λ, ω).
    pub fn weighted(&self, grid: &PolarFrequencyGrid, w: impl Fn(usize, usize) -> f64) -> Self {
        let mut out = self.clone();
        for ia in 0..grid.n_angular() {
            for ir in 0..grid.n_radial() {
                let idx = ia * self.n_radial + ir;
                out.values[idx] *= w(ir, ia);
            }
        }
        out
    }

    pub fn scale(&mut self, c: Complex64) {
        for v in &mut self.values {
            *v *= c;
        }
    }

    /// self += c · other
    pub fn axpy(&mut self, c: Complex64, other: &Self) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
    }
}

/// Complex scalar field on a spatial grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialField {
    pub values: Vec<Complex64>,
}

impl SpatialField {
    pub fn zeros(n: usize) -> Self {
        Self { values: vec![Complex64::new(0.0, 0.0); n] }
    }
    pub fn from_fn(grid: &SpatialGrid, f: impl Fn(&Vector3<f64>) -> Complex64) -> Self {
        Self { values: grid.points().iter().map(f).collect() }
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    pub fn check(&self, grid: &SpatialGrid) -> Result<()> {
        if self.values.len() != grid.len() {
            return Err(Error::ShapeMismatch { expected: grid.len(), got: self.values.len() });
        }
        Ok(())
    }
    pub fn axpy(&mut self, c: Complex64, other: &Self) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
    }
    pub fn sub(&self, other: &Self) -> Self {
        Self { values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect() }
    }
    pub fn scaled(&self, c: Complex64) -> Self {
        Self { values: self.values.iter().map(|v| v * c).collect() }
    }
}

/// Three-component field, one scalar field per Cartesian component.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub components: [SpatialField; 3],
}

impl VectorField {
    pub fn zeros(n: usize) -> Self {
        Self { components: [SpatialField::zeros(n), SpatialField::zeros(n), SpatialField::zeros(n)] }
    }
}

// ============================================================================
// Norms
// ============================================================================

/// sqrt(Σ |f|² λ² w_λ w_ω).
pub fn polar_l2_norm(f: &HalfDensity, g: &PolarFrequencyGrid) -> Result<f64> {
    Ok(polar_inner(f, f, g)?.re.max(0.0).sqrt())
}

/// Σ f conj(h) λ² w_λ w_ω.
pub fn polar_inner(f: &HalfDensity, h: &HalfDensity, g: &PolarFrequencyGrid) -> Result<Complex64> {
    f.check(g)?;
    h.check(g)?;
    let n_r = g.n_radial();
    let terms: Vec<Complex64> = (0..g.len())
        .map(|idx| {
            let (ia, ir) = (idx / n_r, idx % n_r);
            f.values[idx] * h.values[idx].conj() * g.measure(ir, ia)
        })
        .collect();
    Ok(pairwise_sum_complex(&terms))
}

pub fn spatial_l2_norm(f: &SpatialField, g: &SpatialGrid) -> Result<f64> {
    f.check(g)?;
    let terms: Vec<f64> = f.values.iter().zip(g.weights()).map(|(v, w)| v.norm_sqr() * w).collect();
    Ok(pairwise_sum(&terms).sqrt())
}

pub fn vector_l2_norm(f: &VectorField, g: &SpatialGrid) -> Result<f64> {
    let mut s = 0.0;
    for c in &f.components {
        s += spatial_l2_norm(c, g)?.powi(2);
    }
    Ok(s.sqrt())
}

/// Σ w f conj(h).
pub fn spatial_inner(f: &SpatialField, h: &SpatialField, g: &SpatialGrid) -> Result<Complex64> {
    f.check(g)?;
    h.check(g)?;
    let terms: Vec<Complex64> =
        f.values.iter().zip(&h.values).zip(g.weights()).map(|((a, b), w)| a * b.conj() * w).collect();
    Ok(pairwise_sum_complex(&terms))
}

/// Exponents allowed in mixed norms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Exponent {
    Two,
    Infinity,
}

/// L^p_u L^q(P_u) norm of |F| for the foliation by level sets of u(·, ω).
///
/// Points are binned into slabs u ∈ [mΔ, (m+1)Δ). On a slab the L² norm
/// over the level surface uses the coarea measure: ∫_{P_u}|F|² ≈ Δ⁻¹Σ w|F|²/a.
pub fn mixed_norm(
    f: &SpatialField,
    sgrid: &SpatialGrid,
    phase: &PhaseField,
    omega: &Vector3<f64>,
    p: Exponent,
    q: Exponent,
    slab_width: f64,
) -> Result<f64> {
    let vals: Vec<f64> = f.values.iter().map(|v| v.norm()).collect();
    mixed_norm_real(&vals, sgrid, phase, omega, p, q, slab_width)
}

/// `mixed_norm` for a nonnegative real field.
pub fn mixed_norm_real(
    f: &[f64],
    sgrid: &SpatialGrid,
    phase: &PhaseField,
    omega: &Vector3<f64>,
    p: Exponent,
    q: Exponent,
    slab_width: f64,
) -> Result<f64> {
    if sgrid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if f.len() != sgrid.len() {
        return Err(Error::ShapeMismatch { expected: sgrid.len(), got: f.len() });
    }
    if !(slab_width > 0.0) {
        return Err(Error::InvalidArgument(format!("slab width must be positive, got {slab_width}")));
    }
    let mut slabs: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for ((x, v), w) in sgrid.points().iter().zip(f).zip(sgrid.weights()) {
        let (u, grad) = phase.first_order(x, omega);
        let m = (u / slab_width).floor() as i64;
        let contribution = match q {
            Exponent::Two => v * v * w * grad.norm() / slab_width,
            Exponent::Infinity => *v,
        };
        slabs.entry(m).or_default().push(contribution);
    }
    let per_slab = slabs.values().map(|c| match q {
        Exponent::Two => pairwise_sum(c).sqrt(),
        Exponent::Infinity => c.iter().copied().fold(0.0, f64::max),
    });
    Ok(match p {
        Exponent::Two => {
            let sq: Vec<f64> = per_slab.map(|v| slab_width * v * v).collect();
            pairwise_sum(&sq).sqrt()
        }
        Exponent::Infinity => per_slab.fold(0.0, f64::max),
    })
}

// ============================================================================
// Serialized grid specifications and binary arrays
// ============================================================================

/// Text description of a frequency grid and a spatial lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub j_min: i32,
    pub j_max: i32,
    pub radial_per_octave: usize,
    pub angular_count: usize,
    #[serde(rename = "spatial_l")]
    pub spatial_half_width: f64,
    pub lattice_n: usize,
}

impl GridSpec {
    pub fn build(&self) -> Result<(PolarFrequencyGrid, SpatialGrid)> {
        Ok((
            PolarFrequencyGrid::build(self.j_min, self.j_max, self.radial_per_octave, self.angular_count)?,
            SpatialGrid::lattice(self.spatial_half_width, self.lattice_n)?,
        ))
    }
}

/// Header of a flat binary array file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArrayHeader {
    pub kind: String,
    pub shape: Vec<usize>,
    pub grid_hash: String,
}

const ARRAY_MAGIC: &str = "parafio-array 1";

/// Writes a text header followed by little-endian (re, im) f64 pairs.
pub fn write_array<W: Write>(mut w: W, header: &ArrayHeader, data: &[Complex64]) -> Result<()> {
    let expected: usize = header.shape.iter().product();
    if expected != data.len() {
        return Err(Error::ShapeMismatch { expected, got: data.len() });
    }
    let shape: Vec<String> = header.shape.iter().map(|s| s.to_string()).collect();
    write!(w, "{ARRAY_MAGIC}\nkind {}\nshape {}\ngrid {}\nend\n", header.kind, shape.join(" "), header.grid_hash)?;
    for v in data {
        w.write_all(&v.re.to_le_bytes())?;
        w.write_all(&v.im.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_array<R: BufRead>(mut r: R) -> Result<(ArrayHeader, Vec<Complex64>)> {
    let mut line = String::new();
    let mut next_line = |r: &mut R| -> Result<String> {
        line.clear();
        r.read_line(&mut line)?;
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next_line(&mut r)? != ARRAY_MAGIC {
        return Err(Error::Format("missing magic line".into()));
    }
    let mut kind = None;
    let mut shape = None;
    let mut grid_hash = None;
    loop {
        let l = next_line(&mut r)?;
        if l == "end" {
            break;
        }
        let (key, value) = l.split_once(' ').ok_or_else(|| Error::Format(format!("bad header line '{l}'")))?;
        match key {
            "kind" => kind = Some(value.to_string()),
            "shape" => {
                let dims: std::result::Result<Vec<usize>, _> = value.split_whitespace().map(str::parse).collect();
                shape = Some(dims.map_err(|e| Error::Format(format!("bad shape: {e}")))?);
            }
            "grid" => grid_hash = Some(value.to_string()),
            _ => return Err(Error::Format(format!("unknown header key '{key}'"))),
        }
    }
    let header = ArrayHeader {
        kind: kind.ok_or_else(|| Error::Format("missing kind".into()))?,
        shape: shape.ok_or_else(|| Error::Format("missing shape".into()))?,
        grid_hash: grid_hash.ok_or_else(|| Error::Format("missing grid".into()))?,
    };
    let n: usize = header.shape.iter().product();
    let mut bytes = vec![0u8; 16 * n];
    r.read_exact(&mut bytes).map_err(|_| Error::Format("truncated payload".into()))?;
    let data = bytes
        .chunks_exact(16)
        .map(|c| {
            Complex64::new(
                f64::from_le_bytes(c[..8].try_into().unwrap()),
                f64::from_le_bytes(c[8..].try_into().unwrap()),
            )
        })
        .collect();
    Ok((header, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polar_grid_layout() {
        let g = PolarFrequencyGrid::build(0, 3, 8, 64).unwrap();
        assert_eq!(g.n_radial(), 32);
        assert_eq!(g.radial_nodes()[0], 0.5);
        assert_eq!(*g.radial_nodes().last().unwrap(), 16.0);
        let total: f64 = g.angular_weights().iter().sum();
        assert!((total - 4.0 * PI).abs() < 1e-10 * 4.0 * PI);
    }

    #[test]
    fn polar_grid_rejects_bad_counts() {
        assert!(PolarFrequencyGrid::build(2, 1, 8, 64).is_err());
        assert!(PolarFrequencyGrid::build(0, 1, 3, 64).is_err());
        assert!(PolarFrequencyGrid::build(0, 1, 8, 15).is_err());
        assert!(PolarFrequencyGrid::build(0, 1, 0, 64).is_err());
    }

    #[test]
    fn lattice_and_ball_volumes() {
        let g = SpatialGrid::lattice(4.0, 8).unwrap();
        assert!((g.volume() - 512.0).abs() < 1e-8 * 512.0);
        let b = SpatialGrid::ball(1.5, 12, 200).unwrap();
        let v = 4.0 * PI * 1.5f64.powi(3) / 3.0;
        assert!((b.volume() - v).abs() < 1e-8 * v);
    }

    #[test]
    fn array_roundtrip() {
        let header = ArrayHeader { kind: "half_density".into(), shape: vec![2, 3], grid_hash: "abc".into() };
        let data: Vec<Complex64> = (0..6).map(|k| Complex64::new(k as f64, -0.5 * k as f64)).collect();
        let mut buf = Vec::new();
        write_array(&mut buf, &header, &data).unwrap();
        let (h2, d2) = read_array(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(h2, header);
        assert_eq!(d2, data);
        assert!(write_array(Vec::new(), &header, &data[..5]).is_err());
    }
}
