//! The operator Uf(x) = Σ e^{iλu(x,ω)} b(x,ω) f(λω) λ² w_λ w_ω, its dyadic
//! pieces, and the measurements built on them: density spectra,
//! almost-orthogonality scans, diagonal bounds, operator norms and the lower
//! bound against the flat baseline.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::Vector3;
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dyadic::{cutoff, AngularPatchFamily, LittlewoodPaleyFamily, PatchTable, SecondFrequencyFamily};
use crate::error::{Error, Result};
use crate::grid::{
    pairwise_sum, polar_inner, polar_l2_norm, spatial_inner, spatial_l2_norm, HalfDensity, PolarFrequencyGrid,
    SpatialField, SpatialGrid,
};
use crate::phase::PhaseField;
use crate::rng;
use crate::synth::{self, Columns, Source};

// ============================================================================
// Symbols
// ============================================================================

type SymbolFn = dyn Fn(&Vector3<f64>, &Vector3<f64>) -> Complex64 + Send + Sync;

#[derive(Clone)]
pub enum SymbolField {
    Unit,
    /// a⁻¹ − 1 = |∇u| − 1
    LapseInverseMinusOne,
    /// a⁻¹ = |∇u|
    LapseInverse,
    Custom(Arc<SymbolFn>),
}

impl fmt::Debug for SymbolField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl SymbolField {
    pub fn zero() -> Self {
        Self::Custom(Arc::new(|_, _| Complex64::new(0.0, 0.0)))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Unit => "unit",
            Self::LapseInverseMinusOne => "lapse_inverse_minus_one",
            Self::LapseInverse => "lapse_inverse",
            Self::Custom(_) => "custom",
        }
    }

    #[inline]
    pub fn eval(&self, phase: &PhaseField, x: &Vector3<f64>, w: &Vector3<f64>) -> Complex64 {
        match self {
            Self::Unit => Complex64::new(1.0, 0.0),
            Self::LapseInverseMinusOne => Complex64::new(phase.first_order(x, w).1.norm() - 1.0, 0.0),
            Self::LapseInverse => Complex64::new(phase.first_order(x, w).1.norm(), 0.0),
            Self::Custom(f) => f(x, w),
        }
    }
}

struct FioSource<'a> {
    phase: &'a PhaseField,
    symbol: &'a SymbolField,
}

impl Source for FioSource<'_> {
    fn components(&self) -> usize {
        1
    }
    #[inline]
    fn eval(&self, _ix: usize, x: &Vector3<f64>, _ia: usize, w: &Vector3<f64>, sym: &mut [Complex64]) -> f64 {
        match self.symbol {
            SymbolField::Unit => {
                sym[0] = Complex64::new(1.0, 0.0);
                self.phase.value(x, w)
            }
            SymbolField::LapseInverse | SymbolField::LapseInverseMinusOne => {
                let (u, g) = self.phase.first_order(x, w);
                let shift = if matches!(self.symbol, SymbolField::LapseInverse) { 0.0 } else { 1.0 };
                sym[0] = Complex64::new(g.norm() - shift, 0.0);
                u
            }
            SymbolField::Custom(f) => {
                sym[0] = f(x, w);
                self.phase.value(x, w)
            }
        }
    }
}

// ============================================================================
// Pieces
// ============================================================================

/// Selection of the refined interval φ_k for a given angular separation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub separation: f64,
    pub k: usize,
}

/// Index of U_j, U_j^ν or U_j^{ν,k}. The low-frequency piece has
/// j = j_min − 1 and no angular patches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Piece {
    pub j: i32,
    pub nu: Option<usize>,
    pub split: Option<Split>,
}

impl Piece {
    pub fn octave(j: i32) -> Self {
        Self { j, nu: None, split: None }
    }
    pub fn patch(j: i32, nu: usize) -> Self {
        Self { j, nu: Some(nu), split: None }
    }
    pub fn refined(j: i32, nu: usize, separation: f64, k: usize) -> Self {
        Self { j, nu: Some(nu), split: Some(Split { separation, k }) }
    }
}

impl fmt::Display for Piece {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "j={}", self.j)?;
        if let Some(nu) = self.nu {
            write!(f, ",nu={nu}")?;
        }
        if let Some(s) = self.split {
            write!(f, ",k={}@{}", s.k, s.separation)?;
        }
        Ok(())
    }
}

// ============================================================================
// Operator
// ============================================================================

#[derive(Debug, Clone)]
pub struct FioOperator {
    pub phase: PhaseField,
    pub symbol: SymbolField,
    pub fgrid: PolarFrequencyGrid,
    pub sgrid: SpatialGrid,
    pub lp: LittlewoodPaleyFamily,
    pub delta: f64,
    pub alpha: f64,
    families: BTreeMap<i32, (AngularPatchFamily, PatchTable)>,
}

impl FioOperator {
    /// Builds the octave family from the grid's j-range and one angular
    /// family per octave.
    pub fn new(
        phase: PhaseField,
        symbol: SymbolField,
        fgrid: PolarFrequencyGrid,
        sgrid: SpatialGrid,
        delta: f64,
        alpha: f64,
    ) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 0.2) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1/5), got {alpha}")));
        }
        let lp = LittlewoodPaleyFamily::for_grid(&fgrid);
        let mut families = BTreeMap::new();
        for j in lp.j_min..=lp.j_max {
            let fam = AngularPatchFamily::build(j, delta)?;
            let table = fam.table(&fgrid);
            families.insert(j, (fam, table));
        }
        Ok(Self { phase, symbol, fgrid, sgrid, lp, delta, alpha, families })
    }

    /// Same grids and families with another phase or symbol.
    pub fn with_phase(&self, phase: PhaseField) -> Self {
        Self { phase, ..self.clone() }
    }
    pub fn with_symbol(&self, symbol: SymbolField) -> Self {
        Self { symbol, ..self.clone() }
    }

    pub fn angular_family(&self, j: i32) -> Option<&AngularPatchFamily> {
        self.families.get(&j).map(|e| &e.0)
    }

    pub fn patch_table(&self, j: i32) -> Option<&PatchTable> {
        self.families.get(&j).map(|e| &e.1)
    }

    /// Octave indices j_min..=j_max (without the low piece).
    pub fn bands(&self) -> Vec<i32> {
        (self.lp.j_min..=self.lp.j_max).collect()
    }

    fn source(&self) -> FioSource<'_> {
        FioSource { phase: &self.phase, symbol: &self.symbol }
    }

    fn validate(&self, piece: &Piece) -> Result<()> {
        if !self.lp.contains(piece.j) {
            return Err(Error::UnknownPiece(format!("{piece}: octave outside {:?}", self.lp.indices())));
        }
        if let Some(nu) = piece.nu {
            let Some((fam, table)) = self.families.get(&piece.j) else {
                return Err(Error::UnknownPiece(format!("{piece}: the low piece has no angular patches")));
            };
            if nu >= fam.len() {
                return Err(Error::UnknownPiece(format!("{piece}: only {} patches", fam.len())));
            }
            let fewest = table.per_patch.iter().map(Vec::len).min().unwrap_or(0);
            if fewest < 4 {
                return Err(Error::UnderResolved { j: piece.j, nodes: fewest });
            }
        } else if piece.split.is_some() {
            return Err(Error::UnknownPiece(format!("{piece}: a refined split needs a patch")));
        }
        if let Some(s) = piece.split {
            let fam = SecondFrequencyFamily::build(piece.j, self.alpha, s.separation)?;
            if s.k >= fam.len() {
                return Err(Error::UnknownPiece(format!("{piece}: only {} intervals", fam.len())));
            }
        }
        Ok(())
    }

    /// Cutoff weights of a piece on the grid, indexed [ia][ir].
    pub fn piece_weights(&self, piece: &Piece) -> Result<Vec<f64>> {
        self.validate(piece)?;
        let n_r = self.fgrid.n_radial();
        let radial: Vec<f64> = {
            let split = piece
                .split
                .map(|s| SecondFrequencyFamily::build(piece.j, self.alpha, s.separation).map(|f| (f, s.k)))
                .transpose()?;
            self.fgrid
                .radial_nodes()
                .iter()
                .map(|&l| self.lp.weight(piece.j, l) * split.as_ref().map_or(1.0, |(f, k)| f.eval(*k, l)))
                .collect()
        };
        let angular: Vec<f64> = match piece.nu {
            None => vec![1.0; self.fgrid.n_angular()],
            Some(nu) => {
                let mut a = vec![0.0; self.fgrid.n_angular()];
                for &(ia, v) in &self.families[&piece.j].1.per_patch[nu] {
                    a[ia] = v;
                }
                a
            }
        };
        let mut w = Vec::with_capacity(self.fgrid.len());
        for av in &angular {
            for rv in &radial {
                w.push(av * rv);
            }
        }
        debug_assert_eq!(w.len(), n_r * angular.len());
        Ok(w)
    }

    /// Uf on the spatial grid.
    pub fn apply(&self, f: &HalfDensity) -> Result<SpatialField> {
        f.check(&self.fgrid)?;
        Ok(self.apply_weighted(&[f], |_, _| 1.0).remove(0))
    }

    pub fn apply_batch(&self, fs: &[&HalfDensity]) -> Result<Vec<SpatialField>> {
        for f in fs {
            f.check(&self.fgrid)?;
        }
        Ok(self.apply_weighted(fs, |_, _| 1.0))
    }

    /// U with the cutoffs of one piece inserted.
    pub fn apply_piece(&self, f: &HalfDensity, piece: &Piece) -> Result<SpatialField> {
        Ok(self.apply_piece_batch(&[f], piece)?.remove(0))
    }

    pub fn apply_piece_batch(&self, fs: &[&HalfDensity], piece: &Piece) -> Result<Vec<SpatialField>> {
        for f in fs {
            f.check(&self.fgrid)?;
        }
        let w = self.piece_weights(piece)?;
        let n_r = self.fgrid.n_radial();
        Ok(self.apply_weighted(fs, |ir, ia| w[ia * n_r + ir]))
    }

    fn apply_weighted(&self, fs: &[&HalfDensity], weight: impl Fn(usize, usize) -> f64) -> Vec<SpatialField> {
        let cols = Columns::build(&self.fgrid, fs, weight);
        if cols.is_empty() {
            return vec![SpatialField::zeros(self.sgrid.len()); fs.len()];
        }
        synth::forward(&self.fgrid, &self.sgrid, &cols, &self.source())
            .into_iter()
            .map(|mut v| SpatialField { values: v.remove(0) })
            .collect()
    }

    /// Sum of all (j, ν) pieces computed independently in parallel and
    /// added in a fixed order; agrees with `apply` up to rounding.
    pub fn apply_by_pieces(&self, f: &HalfDensity) -> Result<SpatialField> {
        f.check(&self.fgrid)?;
        let mut pieces = vec![Piece::octave(self.lp.low_index())];
        for j in self.bands() {
            for nu in 0..self.families[&j].0.len() {
                pieces.push(Piece::patch(j, nu));
            }
        }
        let images: Vec<SpatialField> = pieces
            .par_iter()
            .map(|p| {
                let w = self.piece_weights(p)?;
                let n_r = self.fgrid.n_radial();
                let cols = Columns::build(&self.fgrid, &[f], |ir, ia| w[ia * n_r + ir]);
                if cols.is_empty() {
                    return Ok(SpatialField::zeros(self.sgrid.len()));
                }
                let mut out = synth::forward(&self.fgrid, &self.sgrid, &cols, &self.source());
                Ok(SpatialField { values: out.remove(0).remove(0) })
            })
            .collect::<Result<_>>()?;
        let mut total = SpatialField::zeros(self.sgrid.len());
        for (ix, v) in total.values.iter_mut().enumerate() {
            let terms: Vec<Complex64> = images.iter().map(|im| im.values[ix]).collect();
            *v = crate::grid::pairwise_sum_complex(&terms);
        }
        Ok(total)
    }

    /// U* with respect to the weighted inner products.
    pub fn adjoint(&self, g: &SpatialField) -> Result<HalfDensity> {
        g.check(&self.sgrid)?;
        Ok(self.adjoint_batch(&[g]).remove(0))
    }

    pub fn adjoint_batch(&self, gs: &[&SpatialField]) -> Vec<HalfDensity> {
        let fields: Vec<Vec<&[Complex64]>> = gs.iter().map(|g| vec![g.values.as_slice()]).collect();
        synth::adjoint(&self.fgrid, &self.sgrid, &fields, &self.source(), |_| true)
    }
}

// ============================================================================
// Spectrum
// ============================================================================

/// Norms of the density restricted to each piece.
///
/// The restriction uses square roots of the cutoffs, e.g.
/// γ_j = ‖ψ(2^{−j}λ)^{1/2} f‖, so that ‖f‖² = γ_low² + Σ_j γ_j² + γ_top²
/// holds exactly, where γ_top measures the part above 2^{j_max}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceSpectrum {
    pub total: f64,
    /// (j, γ_j), low piece first.
    pub gamma_j: Vec<(i32, f64)>,
    pub gamma_j_nu: BTreeMap<i32, Vec<f64>>,
    /// Present when a separation was given: γ_j^{ν,k}.
    pub gamma_j_nu_k: Option<BTreeMap<i32, Vec<Vec<f64>>>>,
    pub uncovered: f64,
}

impl PieceSpectrum {
    pub fn gamma(&self, j: i32) -> f64 {
        self.gamma_j.iter().find(|e| e.0 == j).map_or(0.0, |e| e.1)
    }
}

pub fn spectrum(op: &FioOperator, f: &HalfDensity, separation: Option<f64>) -> Result<PieceSpectrum> {
    f.check(&op.fgrid)?;
    let g = &op.fgrid;
    let n_r = g.n_radial();
    let dens: Vec<f64> = (0..g.len()).map(|idx| f.values()[idx].norm_sqr() * g.measure(idx % n_r, idx / n_r)).collect();
    let lams = g.radial_nodes();
    let norm_with = |w: &dyn Fn(usize, usize) -> f64| -> f64 {
        let terms: Vec<f64> = (0..g.len()).map(|idx| dens[idx] * w(idx % n_r, idx / n_r)).collect();
        pairwise_sum(&terms).max(0.0).sqrt()
    };
    let total = pairwise_sum(&dens).sqrt();
    let gamma_j = op.lp.indices().map(|j| (j, norm_with(&|ir, _| op.lp.weight(j, lams[ir])))).collect();
    let uncovered = norm_with(&|ir, _| op.lp.uncovered(lams[ir]));
    let mut gamma_j_nu = BTreeMap::new();
    let mut gamma_j_nu_k = separation.map(|_| BTreeMap::new());
    for j in op.bands() {
        let (fam, table) = &op.families[&j];
        let mut per_nu = Vec::with_capacity(fam.len());
        let mut per_nu_k = Vec::new();
        let split = separation.map(|s| SecondFrequencyFamily::build(j, op.alpha, s)).transpose()?;
        for patch in &table.per_patch {
            let patch_norm = |rad: &dyn Fn(f64) -> f64| -> f64 {
                let mut terms = Vec::with_capacity(patch.len() * n_r);
                for &(ia, eta) in patch {
                    for ir in 0..n_r {
                        terms.push(dens[ia * n_r + ir] * eta * rad(lams[ir]));
                    }
                }
                pairwise_sum(&terms).max(0.0).sqrt()
            };
            per_nu.push(patch_norm(&|l| op.lp.weight(j, l)));
            if let Some(sf) = &split {
                per_nu_k.push((0..sf.len()).map(|k| patch_norm(&|l| op.lp.weight(j, l) * sf.eval(k, l))).collect());
            }
        }
        gamma_j_nu.insert(j, per_nu);
        if let Some(m) = gamma_j_nu_k.as_mut() {
            m.insert(j, per_nu_k);
        }
    }
    Ok(PieceSpectrum { total, gamma_j, gamma_j_nu, gamma_j_nu_k, uncovered })
}

// ============================================================================
// Correlations and scans
// ============================================================================

/// ⟨U_a f, U_b f⟩ over the spatial grid.
pub fn correlation(op: &FioOperator, f: &HalfDensity, a: &Piece, b: &Piece) -> Result<Complex64> {
    let ua = op.apply_piece(f, a)?;
    let ub = if a == b { ua.clone() } else { op.apply_piece(f, b)? };
    spatial_inner(&ua, &ub, &op.sgrid)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ScanMode {
    /// Octave pairs with both indices in [j_lo, j_hi].
    Frequency { j_lo: i32, j_hi: i32 },
    /// Patch pairs inside octave j.
    Angle { j: i32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub a: i64,
    pub b: i64,
    /// |j − k| for frequency scans, 2^{j/2}|ν − ν′| for angle scans.
    pub separation: f64,
    pub measured: f64,
    pub envelope: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayTable {
    pub mode: ScanMode,
    pub rows: Vec<DecayRow>,
    /// max ratio over the rows
    pub fitted_c: f64,
    /// (lower bin edge, median measured) for separation bins that double.
    pub medians: Vec<(f64, f64)>,
    pub skipped: usize,
}

/// The angular envelope 1/(2^{jα/2} s^{2−α}) + 1/s³ at s = 2^{j/2}|ν − ν′|.
pub fn angular_envelope(j: i32, alpha: f64, s: f64) -> f64 {
    1.0 / (2f64.powf(j as f64 * alpha / 2.0) * s.powf(2.0 - alpha)) + 1.0 / (s * s * s)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Threshold below which a piece norm is treated as degenerate.
pub const GAMMA_FLOOR: f64 = 1e-12;

pub fn orthogonality_scan(op: &FioOperator, f: &HalfDensity, mode: ScanMode) -> Result<DecayTable> {
    let spec = spectrum(op, f, None)?;
    let mut rows = Vec::new();
    let mut skipped = 0;
    match mode {
        ScanMode::Frequency { j_lo, j_hi } => {
            let js: Vec<i32> = op.bands().into_iter().filter(|j| *j >= j_lo && *j <= j_hi).collect();
            if js.len() < 4 {
                return Err(Error::InvalidArgument(format!("frequency scan needs 4 octaves, window has {}", js.len())));
            }
            let images: Vec<SpatialField> =
                js.iter().map(|j| op.apply_piece(f, &Piece::octave(*j))).collect::<Result<_>>()?;
            for a in 0..js.len() {
                for b in a + 1..js.len() {
                    let d = (js[b] - js[a]).abs();
                    if d <= 2 {
                        continue;
                    }
                    let (ga, gb) = (spec.gamma(js[a]), spec.gamma(js[b]));
                    if ga < GAMMA_FLOOR || gb < GAMMA_FLOOR {
                        skipped += 1;
                        continue;
                    }
                    let measured = spatial_inner(&images[a], &images[b], &op.sgrid)?.norm() / (ga * gb);
                    let envelope = 2f64.powf(-(d as f64) / 2.0);
                    rows.push(DecayRow {
                        a: js[a] as i64,
                        b: js[b] as i64,
                        separation: d as f64,
                        measured,
                        envelope,
                        ratio: measured / envelope,
                    });
                }
            }
        }
        ScanMode::Angle { j } => {
            let fam = op.angular_family(j).ok_or_else(|| Error::UnknownPiece(format!("octave {j}")))?;
            if fam.len() < 8 {
                return Err(Error::InvalidArgument("angle scan needs 8 patches".into()));
            }
            let gammas = &spec.gamma_j_nu[&j];
            let live: Vec<usize> = (0..fam.len()).filter(|nu| gammas[*nu] >= GAMMA_FLOOR).collect();
            skipped += fam.len() - live.len();
            let images: Vec<SpatialField> =
                live.iter().map(|nu| op.apply_piece(f, &Piece::patch(j, *nu))).collect::<Result<_>>()?;
            let scale = 2f64.powf(j as f64 / 2.0);
            let pairs: Vec<(usize, usize)> =
                (0..live.len()).flat_map(|a| (a + 1..live.len()).map(move |b| (a, b))).collect();
            rows = pairs
                .par_iter()
                .map(|&(a, b)| {
                    let (na, nb) = (live[a], live[b]);
                    let s = scale * (fam.centers()[na] - fam.centers()[nb]).norm();
                    let measured = spatial_inner(&images[a], &images[b], &op.sgrid).expect("same grid").norm()
                        / (gammas[na] * gammas[nb]);
                    let envelope = angular_envelope(j, op.alpha, s);
                    DecayRow { a: na as i64, b: nb as i64, separation: s, measured, envelope, ratio: measured / envelope }
                })
                .collect();
        }
    }
    let fitted_c = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let medians = separation_medians(&rows);
    Ok(DecayTable { mode, rows, fitted_c, medians, skipped })
}

fn separation_medians(rows: &[DecayRow]) -> Vec<(f64, f64)> {
    let Some(smin) = rows.iter().map(|r| r.separation).filter(|s| *s > 0.0).reduce(f64::min) else {
        return Vec::new();
    };
    let mut bins: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for r in rows {
        let k = (r.separation / smin).log2().floor() as i64;
        bins.entry(k).or_default().push(r.measured);
    }
    bins.into_iter().map(|(k, v)| (smin * 2f64.powi(k as i32), median(v))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagonalNorm {
    pub norm: f64,
    pub gamma: f64,
    /// ‖U_j^ν f‖ / γ_j^ν
    pub ratio: f64,
    pub skipped: bool,
}

pub fn diagonal_norm(op: &FioOperator, f: &HalfDensity, j: i32, nu: usize) -> Result<DiagonalNorm> {
    let spec = spectrum(op, f, None)?;
    let gamma = spec
        .gamma_j_nu
        .get(&j)
        .and_then(|v| v.get(nu))
        .copied()
        .ok_or_else(|| Error::UnknownPiece(format!("j={j},nu={nu}")))?;
    let norm = spatial_l2_norm(&op.apply_piece(f, &Piece::patch(j, nu))?, &op.sgrid)?;
    if gamma < GAMMA_FLOOR {
        return Ok(DiagonalNorm { norm, gamma, ratio: 0.0, skipped: true });
    }
    Ok(DiagonalNorm { norm, gamma, ratio: norm / gamma, skipped: false })
}

/// Diagonal ratios for every patch of the listed octaves.
pub fn diagonal_sweep(op: &FioOperator, f: &HalfDensity, js: &[i32]) -> Result<Vec<(i32, usize, DiagonalNorm)>> {
    let spec = spectrum(op, f, None)?;
    let mut out = Vec::new();
    for &j in js {
        let gammas = spec.gamma_j_nu.get(&j).ok_or_else(|| Error::UnknownPiece(format!("octave {j}")))?;
        let rows: Vec<(i32, usize, DiagonalNorm)> = (0..gammas.len())
            .into_par_iter()
            .map(|nu| {
                let gamma = gammas[nu];
                let norm = spatial_l2_norm(&op.apply_piece(f, &Piece::patch(j, nu))?, &op.sgrid)?;
                let skipped = gamma < GAMMA_FLOOR;
                let ratio = if skipped { 0.0 } else { norm / gamma };
                Ok((j, nu, DiagonalNorm { norm, gamma, ratio, skipped }))
            })
            .collect::<Result<_>>()?;
        out.extend(rows);
    }
    Ok(out)
}

// ============================================================================
// Norm estimates
// ============================================================================

/// Smooth random densities: a few localized packets per sample,
///   f(λω) = env(λ) Σ_m c_m exp(−iλω·x_m + κ ω·d_m),
/// with x_m uniform in a ball, d_m uniform on the sphere and env a smooth
/// bump vanishing outside [lo, hi].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityEnsemble {
    pub lo: f64,
    pub hi: f64,
    pub center_radius: f64,
    pub packets: usize,
    pub anisotropy: f64,
}

impl DensityEnsemble {
    /// Envelope over [2^{j_min−1}, 2^{j_max}], where the octave pieces sum to 1.
    pub fn for_grid(grid: &PolarFrequencyGrid) -> Self {
        let (j0, j1) = grid.j_range();
        Self { lo: 2f64.powi(j0 - 1), hi: 2f64.powi(j1), center_radius: 1.0, packets: 3, anisotropy: 1.0 }
    }

    pub fn envelope(&self, lambda: f64) -> f64 {
        (1.0 - cutoff(lambda / self.lo)) * cutoff(2.0 * lambda / self.hi)
    }

    pub fn sample<R: Rng>(&self, grid: &PolarFrequencyGrid, rng: &mut R) -> HalfDensity {
        let packets: Vec<(Complex64, Vector3<f64>, Vector3<f64>)> = (0..self.packets)
            .map(|_| {
                let c = rng::complex_normal(rng);
                let x = loop {
                    let p = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                    if p.norm_squared() <= 1.0 {
                        break p * self.center_radius;
                    }
                };
                let d = loop {
                    let p = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                    let n = p.norm();
                    if n > 0.1 && n <= 1.0 {
                        break p / n;
                    }
                };
                (c, x, d)
            })
            .collect();
        HalfDensity::from_fn(grid, |l, w| {
            let env = self.envelope(l);
            if env == 0.0 {
                return Complex64::new(0.0, 0.0);
            }
            packets
                .iter()
                .map(|(c, x, d)| c * Complex64::from_polar((self.anisotropy * w.dot(d)).exp(), -l * w.dot(x)))
                .sum::<Complex64>()
                * env
        })
    }

    /// `count` samples from sub-streams `first..first+count` of `seed`.
    pub fn draw(&self, grid: &PolarFrequencyGrid, seed: u64, first: u64, count: usize) -> Vec<HalfDensity> {
        (0..count as u64).map(|i| self.sample(grid, &mut rng::stream(seed, first + i))).collect()
    }
}

/// ‖U g‖/‖g‖ for the flat phase and unit symbol with g = ψ(2^{−j_max}λ),
/// the best-localized single-octave shell on the grid.
pub fn baseline(fgrid: &PolarFrequencyGrid, sgrid: &SpatialGrid) -> Result<f64> {
    let (_, j_max) = fgrid.j_range();
    let g = HalfDensity::from_fn(fgrid, |l, _| Complex64::new(crate::dyadic::band(l * 2f64.powi(-j_max)), 0.0));
    let flat = PhaseField::flat();
    let src = FioSource { phase: &flat, symbol: &SymbolField::Unit };
    let cols = Columns::build(fgrid, &[&g], |_, _| 1.0);
    let image = SpatialField { values: synth::forward(fgrid, sgrid, &cols, &src).remove(0).remove(0) };
    Ok(spatial_l2_norm(&image, sgrid)? / polar_l2_norm(&g, fgrid)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormEstimate {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Largest singular value by power iteration on U*U from an ensemble of
/// random starts; the largest Rayleigh quotient wins.
pub fn operator_norm(op: &FioOperator, ensemble_size: usize, power_iters: usize, seed: u64) -> Result<NormEstimate> {
    if ensemble_size < 1 || power_iters < 5 {
        return Err(Error::InvalidArgument("operator_norm needs ensemble_size ≥ 1 and power_iters ≥ 5".into()));
    }
    let ens = DensityEnsemble::for_grid(&op.fgrid);
    let mut v = ens.draw(&op.fgrid, seed, 0, ensemble_size);
    for d in &mut v {
        let n = polar_l2_norm(d, &op.fgrid)?;
        if n > 0.0 {
            d.scale(Complex64::new(1.0 / n, 0.0));
        }
    }
    let mut history: Vec<Vec<f64>> = Vec::new();
    for _ in 0..power_iters {
        let refs: Vec<&HalfDensity> = v.iter().collect();
        let images = op.apply_weighted(&refs, |_, _| 1.0);
        let img_refs: Vec<&SpatialField> = images.iter().collect();
        let back = op.adjoint_batch(&img_refs);
        let mut sig = Vec::with_capacity(v.len());
        for (b, z) in back.into_iter().enumerate() {
            let rq = spatial_l2_norm(&images[b], &op.sgrid)?;
            sig.push(rq);
            let n = polar_l2_norm(&z, &op.fgrid)?;
            v[b] = z;
            if n > 0.0 {
                v[b].scale(Complex64::new(1.0 / n, 0.0));
            }
        }
        history.push(sig);
    }
    let last = history.last().expect("at least five iterations");
    let (best, value) = last.iter().copied().enumerate().fold((0, 0.0), |acc, (i, s)| if s > acc.1 { (i, s) } else { acc });
    let prev = history[history.len() - 2][best];
    let converged = value == 0.0 || ((value - prev) / value).abs() < 1e-3;
    Ok(NormEstimate { value, converged, iterations: power_iters })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowerBound {
    pub ratio: f64,
    /// sup |b − 1| over sampled (x, ω)
    pub symbol_deviation: f64,
    pub hypothesis_ok: bool,
}

/// Largest |b − 1| tolerated before the lower bound is reported as outside
/// its hypotheses.
pub const SYMBOL_DEVIATION_LIMIT: f64 = 0.5;

/// min over the ensemble of ‖Uf‖/(baseline·‖f‖).
pub fn lower_bound_ratio(
    op: &FioOperator,
    ensemble: &DensityEnsemble,
    ensemble_size: usize,
    seed: u64,
    baseline: f64,
) -> Result<LowerBound> {
    let stride = (op.fgrid.n_angular() / 64).max(1);
    let symbol_deviation = op
        .sgrid
        .points()
        .iter()
        .flat_map(|x| {
            op.fgrid.angular_nodes().iter().step_by(stride).map(move |w| (op.symbol.eval(&op.phase, x, w) - 1.0).norm())
        })
        .fold(0.0, f64::max);
    let fs = ensemble.draw(&op.fgrid, seed, 0, ensemble_size);
    let refs: Vec<&HalfDensity> = fs.iter().collect();
    let images = op.apply_batch(&refs)?;
    let mut ratio = f64::INFINITY;
    for (f, im) in fs.iter().zip(&images) {
        let nf = polar_l2_norm(f, &op.fgrid)?;
        if nf > 0.0 {
            ratio = ratio.min(spatial_l2_norm(im, &op.sgrid)? / (baseline * nf));
        }
    }
    Ok(LowerBound { ratio, symbol_deviation, hypothesis_ok: symbol_deviation <= SYMBOL_DEVIATION_LIMIT })
}

/// ⟨f, h⟩ re-exported for callers that only import this module.
pub fn density_inner(f: &HalfDensity, h: &HalfDensity, g: &PolarFrequencyGrid) -> Result<Complex64> {
    polar_inner(f, h, g)
}
