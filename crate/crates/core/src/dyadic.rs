//! Partitions of unity: Littlewood–Paley octaves in λ, angular patches on
//! the sphere, and the refined split of one octave into short intervals.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::grid::{fibonacci_sphere, PolarFrequencyGrid};

// ============================================================================
// Smooth building blocks
// ============================================================================

/// S(s) = exp(−1/s) for s > 0 and 0 otherwise, with S' and S''.
#[inline]
fn s_jet(s: f64) -> (f64, f64, f64) {
    if s <= 1.0 / 700.0 {
        return (0.0, 0.0, 0.0);
    }
    let v = (-1.0 / s).exp();
    let inv = 1.0 / s;
    let d1 = v * inv * inv;
    let d2 = v * inv * inv * inv * (inv - 2.0);
    (v, d1, d2)
}

/// χ(r) and its first two derivatives in r for r ≥ 0: 1 on [0,1], 0 on [2,∞).
pub fn cutoff_jet(r: f64) -> (f64, f64, f64) {
    let r = r.abs();
    if r <= 1.0 {
        return (1.0, 0.0, 0.0);
    }
    if r >= 2.0 {
        return (0.0, 0.0, 0.0);
    }
    let (p, dp, ddp) = {
        let (v, d1, d2) = s_jet(2.0 - r);
        (v, -d1, d2)
    };
    let (q, dq, ddq) = s_jet(r - 1.0);
    let d = p + q;
    let num = dp * q - p * dq;
    let dnum = ddp * q - p * ddq;
    let dd = dp + dq;
    (p / d, num / (d * d), dnum / (d * d) - 2.0 * num * dd / (d * d * d))
}

/// χ(t): even, 1 on [−1,1], supported in [−2,2].
#[inline]
pub fn cutoff(t: f64) -> f64 {
    cutoff_jet(t).0
}

/// Smooth step: 0 for t ≤ −1, 1 for t ≥ 1.
#[inline]
pub fn smooth_step(t: f64) -> f64 {
    if t <= -1.0 {
        return 0.0;
    }
    if t >= 1.0 {
        return 1.0;
    }
    let a = s_jet(1.0 + t).0;
    let b = s_jet(1.0 - t).0;
    a / (a + b)
}

/// ψ(λ) = χ(λ) − χ(2λ), supported in [1/2, 2].
#[inline]
pub fn band(lambda: f64) -> f64 {
    if lambda <= 0.5 || lambda >= 2.0 {
        return 0.0;
    }
    cutoff(lambda) - cutoff(2.0 * lambda)
}

// ============================================================================
// Littlewood–Paley family
// ============================================================================

/// Octave pieces j_min..=j_max plus a low piece indexed j_min − 1, with
/// χ(2^{1−j_min}λ) + Σ_j ψ(2^{−j}λ) = χ(2^{−j_max}λ), hence 1 on [0, 2^{j_max}].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LittlewoodPaleyFamily {
    pub j_min: i32,
    pub j_max: i32,
}

impl LittlewoodPaleyFamily {
    pub fn build(j_max: i32) -> Result<Self> {
        if j_max < 0 {
            return Err(Error::InvalidArgument(format!("j_max must be ≥ 0, got {j_max}")));
        }
        Ok(Self { j_min: 0, j_max })
    }

    /// Family whose octaves start at j_min; the low piece is χ(2^{1−j_min}λ).
    pub fn with_range(j_min: i32, j_max: i32) -> Result<Self> {
        if j_min > j_max {
            return Err(Error::InvalidArgument(format!("j_min {j_min} exceeds j_max {j_max}")));
        }
        Ok(Self { j_min, j_max })
    }

    pub fn for_grid(grid: &PolarFrequencyGrid) -> Self {
        let (j_min, j_max) = grid.j_range();
        Self { j_min, j_max }
    }

    pub fn low_index(&self) -> i32 {
        self.j_min - 1
    }

    /// All piece indices, low piece first.
    pub fn indices(&self) -> std::ops::RangeInclusive<i32> {
        self.low_index()..=self.j_max
    }

    pub fn contains(&self, j: i32) -> bool {
        self.indices().contains(&j)
    }

    pub fn low_cutoff(&self, lambda: f64) -> f64 {
        cutoff(lambda * 2f64.powi(1 - self.j_min))
    }

    /// Weight of piece j at λ.
    pub fn weight(&self, j: i32, lambda: f64) -> f64 {
        if j == self.low_index() {
            self.low_cutoff(lambda)
        } else {
            band(lambda * 2f64.powi(-j))
        }
    }

    /// Closed support interval of piece j.
    pub fn support(&self, j: i32) -> (f64, f64) {
        if j == self.low_index() {
            (0.0, 2f64.powi(self.j_min))
        } else {
            (2f64.powi(j - 1), 2f64.powi(j + 1))
        }
    }

    /// 1 − Σ pieces: the part of frequency space above the covered range.
    pub fn uncovered(&self, lambda: f64) -> f64 {
        1.0 - cutoff(lambda * 2f64.powi(-self.j_max))
    }
}

// ============================================================================
// Angular patches
// ============================================================================

/// Normalized smooth caps η_j^ν = β_ν / Σ_μ β_μ on Fibonacci centers.
///
/// β_ν(ω) = exp(−1/(1 − |ω−ν|²/ρ²)) inside the chordal radius ρ.
#[derive(Debug, Clone, PartialEq)]
pub struct AngularPatchFamily {
    pub j: i32,
    pub delta: f64,
    centers: Vec<Vector3<f64>>,
    radius: f64,
}

/// Patch count per unit of 2^j/δ².
const PATCH_DENSITY: f64 = 3.0;
/// Cap radius in units of the mean center spacing sqrt(4π/n).
const CAP_RADIUS: f64 = 0.95;

impl AngularPatchFamily {
    pub fn build(j: i32, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(Error::InvalidArgument(format!("delta must lie in (0,1], got {delta}")));
        }
        let target = PATCH_DENSITY * 2f64.powi(j) / (delta * delta);
        if target > 5.0e6 {
            return Err(Error::InvalidArgument(format!("octave {j} needs {target:.0} patches")));
        }
        let count = (target.round() as usize).max(12);
        let centers = fibonacci_sphere(count);
        let radius = CAP_RADIUS * (4.0 * std::f64::consts::PI / count as f64).sqrt();
        Ok(Self { j, delta, centers, radius })
    }

    pub fn centers(&self) -> &[Vector3<f64>] {
        &self.centers
    }
    pub fn len(&self) -> usize {
        self.centers.len()
    }
    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
    /// Chordal support radius of every cap.
    pub fn cap_radius(&self) -> f64 {
        self.radius
    }
    /// Geodesic diameter of each patch support.
    pub fn diameter(&self) -> f64 {
        4.0 * (0.5 * self.radius).asin()
    }

    #[inline]
    fn beta(&self, nu: &Vector3<f64>, omega: &Vector3<f64>) -> f64 {
        let q = (omega - nu).norm_squared() / (self.radius * self.radius);
        if q >= 1.0 {
            0.0
        } else {
            (-1.0 / (1.0 - q)).exp()
        }
    }

    /// Nonzero (patch index, η) pairs at ω.
    pub fn eval_all(&self, omega: &Vector3<f64>) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = Vec::new();
        let mut total = 0.0;
        for (i, nu) in self.centers.iter().enumerate() {
            let b = self.beta(nu, omega);
            if b > 0.0 {
                out.push((i, b));
                total += b;
            }
        }
        for e in &mut out {
            e.1 /= total;
        }
        out
    }

    pub fn eval(&self, patch: usize, omega: &Vector3<f64>) -> f64 {
        self.eval_all(omega).into_iter().find(|e| e.0 == patch).map_or(0.0, |e| e.1)
    }

    /// Tangential gradient of η_j^ν at ω.
    pub fn gradient(&self, patch: usize, omega: &Vector3<f64>) -> Vector3<f64> {
        let mut total = 0.0;
        let mut dtotal = Vector3::zeros();
        let mut own = 0.0;
        let mut down = Vector3::zeros();
        let r2 = self.radius * self.radius;
        for (i, nu) in self.centers.iter().enumerate() {
            let q = (omega - nu).norm_squared() / r2;
            if q >= 1.0 {
                continue;
            }
            let b = (-1.0 / (1.0 - q)).exp();
            // ∇|ω−ν|² projected on the tangent plane is −2(ν − (ω·ν)ω).
            let dq = -(nu - omega * omega.dot(nu)) * (2.0 / r2);
            let db = dq * (-b / ((1.0 - q) * (1.0 - q)));
            total += b;
            dtotal += db;
            if i == patch {
                own = b;
                down = db;
            }
        }
        if own == 0.0 {
            return Vector3::zeros();
        }
        (down * total - dtotal * own) / (total * total)
    }

    /// Sparse table of patch weights at every angular node of a grid.
    pub fn table(&self, grid: &PolarFrequencyGrid) -> PatchTable {
        let per_node: Vec<Vec<(usize, f64)>> = grid.angular_nodes().iter().map(|w| self.eval_all(w)).collect();
        let mut per_patch = vec![Vec::new(); self.len()];
        for (ia, entries) in per_node.iter().enumerate() {
            for &(p, v) in entries {
                per_patch[p].push((ia, v));
            }
        }
        PatchTable { per_node, per_patch }
    }

    /// Fails when some patch holds fewer than 4 angular nodes of the grid.
    pub fn check_resolution(&self, grid: &PolarFrequencyGrid) -> Result<()> {
        let table = self.table(grid);
        let fewest = table.per_patch.iter().map(Vec::len).min().unwrap_or(0);
        if fewest < 4 {
            return Err(Error::UnderResolved { j: self.j, nodes: fewest });
        }
        Ok(())
    }
}

/// Patch weights at the angular nodes of one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTable {
    /// For each angular node, the (patch, η) pairs that are nonzero there.
    pub per_node: Vec<Vec<(usize, f64)>>,
    /// For each patch, the (angular node, η) pairs in its support.
    pub per_patch: Vec<Vec<(usize, f64)>>,
}

// ============================================================================
// Refined split of one octave
// ============================================================================

/// ⌈separation^{−α}⌉ equal-width smooth bumps on [2^{j−1}, 2^{j+1}].
#[derive(Debug, Clone, PartialEq)]
pub struct SecondFrequencyFamily {
    pub j: i32,
    pub alpha: f64,
    pub separation: f64,
    breakpoints: Vec<f64>,
    overlap: f64,
}

impl SecondFrequencyFamily {
    pub fn build(j: i32, alpha: f64, separation: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 0.2) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1/5), got {alpha}")));
        }
        if !(separation > 0.0 && separation <= 2.0) {
            return Err(Error::InvalidArgument(format!("separation must lie in (0, 2], got {separation}")));
        }
        let count = (separation.powf(-alpha) - 1e-9).ceil().max(1.0) as usize;
        let (a, b) = (2f64.powi(j - 1), 2f64.powi(j + 1));
        let width = (b - a) / count as f64;
        let breakpoints = (1..count).map(|k| a + width * k as f64).collect();
        Ok(Self { j, alpha, separation, breakpoints, overlap: 0.25 * width })
    }

    pub fn len(&self) -> usize {
        self.breakpoints.len() + 1
    }
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn octave(&self) -> (f64, f64) {
        (2f64.powi(self.j - 1), 2f64.powi(self.j + 1))
    }

    /// φ_k(λ); zero outside the octave.
    pub fn eval(&self, k: usize, lambda: f64) -> f64 {
        let (a, b) = self.octave();
        if k >= self.len() || lambda < a || lambda > b {
            return 0.0;
        }
        let rise = if k == 0 { 1.0 } else { smooth_step((lambda - self.breakpoints[k - 1]) / self.overlap) };
        let fall = if k + 1 == self.len() { 0.0 } else { smooth_step((lambda - self.breakpoints[k]) / self.overlap) };
        rise - fall
    }

    /// Closed support interval of φ_k.
    pub fn support(&self, k: usize) -> (f64, f64) {
        let (a, b) = self.octave();
        let lo = if k == 0 { a } else { (self.breakpoints[k - 1] - self.overlap).max(a) };
        let hi = if k + 1 == self.len() { b } else { (self.breakpoints[k] + self.overlap).min(b) };
        (lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cutoff_derivatives_match_differences() {
        for &r in &[1.1, 1.3, 1.5, 1.77, 1.95] {
            let h = 1e-5;
            let (v, d1, d2) = cutoff_jet(r);
            let (vp, d1p, _) = cutoff_jet(r + h);
            let (vm, d1m, _) = cutoff_jet(r - h);
            assert!((d1 - (vp - vm) / (2.0 * h)).abs() < 1e-7, "r={r}");
            assert!((d2 - (d1p - d1m) / (2.0 * h)).abs() < 1e-6, "r={r}");
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn band_values() {
        for j in 0..4 {
            let s = 2f64.powi(-j);
            let v = band(3.0 * 2f64.powi(j - 2) * s);
            assert!(v > 0.0 && v < 1.0);
            assert_eq!(band(2f64.powi(j + 2) * s), 0.0);
        }
    }

    #[test]
    fn second_family_counts() {
        assert_eq!(SecondFrequencyFamily::build(3, 0.125, 1.0).unwrap().len(), 1);
        assert_eq!(SecondFrequencyFamily::build(3, 0.125, 2f64.powi(-8)).unwrap().len(), 2);
        let single = SecondFrequencyFamily::build(2, 0.125, 1.0).unwrap();
        for i in 0..100 {
            let l = 2.0 + 6.0 * i as f64 / 99.0;
            assert_eq!(single.eval(0, l), 1.0);
        }
    }
}
