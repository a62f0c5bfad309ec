//! Direct summation engine for oscillatory sums over a polar grid.
//!
//! Forward: F_c(x) = Σ_ω s_c(x,ω) Σ_λ e^{iλ t(x,ω)} C(λ,ω)
//! Adjoint: A(λ,ω) = Σ_x w_x e^{−iλ t(x,ω)} Σ_c conj(s_c(x,ω)) G_c(x)
//!
//! t and s come from a [`Source`]; C already contains the quadrature measure
//! and any cutoffs. Both directions accept a batch of inputs that share the
//! oscillatory factors. Every output entry is reduced in a fixed order, so
//! results do not depend on the thread count.

use nalgebra::Vector3;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::cis::{radial_scatter, radial_scatter_batch, radial_sum, radial_sum_batch};
use crate::grid::{HalfDensity, PolarFrequencyGrid, SpatialGrid};

/// Phase value and symbol components at (x, ω).
pub trait Source: Sync {
    /// Number of symbol components.
    fn components(&self) -> usize;
    /// Writes the symbol into `sym` and returns t with the oscillation e^{iλt}.
    fn eval(&self, ix: usize, x: &Vector3<f64>, ia: usize, w: &Vector3<f64>, sym: &mut [Complex64]) -> f64;
}

/// One angular node with its active radial range [r0, r1).
#[derive(Debug, Clone, Copy, PartialEq)]
struct Column {
    ia: usize,
    r0: usize,
    r1: usize,
    offset: usize,
}

/// Weighted coefficients of a batch of densities, stored per active column.
#[derive(Debug, Clone)]
pub struct Columns {
    batch: usize,
    cols: Vec<Column>,
    data: Vec<Complex64>,
}

impl Columns {
    /// C_b(λ,ω) = f_b(λ,ω)·λ²w_λw_ω·weight(ir, ia). Radial runs where the
    /// weight vanishes are trimmed from both ends of each column.
    pub fn build(grid: &PolarFrequencyGrid, densities: &[&HalfDensity], weight: impl Fn(usize, usize) -> f64) -> Self {
        let n_r = grid.n_radial();
        let batch = densities.len();
        let mut cols = Vec::new();
        let mut data = Vec::new();
        let mut wbuf = vec![0.0; n_r];
        for ia in 0..grid.n_angular() {
            for (ir, wv) in wbuf.iter_mut().enumerate() {
                *wv = weight(ir, ia);
            }
            let Some(r0) = wbuf.iter().position(|v| *v != 0.0) else { continue };
            let r1 = n_r - wbuf.iter().rev().position(|v| *v != 0.0).unwrap();
            let offset = data.len();
            for f in densities {
                for ir in r0..r1 {
                    data.push(f.get(ir, ia) * (wbuf[ir] * grid.measure(ir, ia)));
                }
            }
            cols.push(Column { ia, r0, r1, offset });
        }
        Self { batch, cols, data }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
    pub fn is_empty(&self) -> bool {
        self.cols.is_empty()
    }
}

/// Forward sums. Output layout: `out[b][c][ix]`.
pub fn forward<S: Source>(
    fgrid: &PolarFrequencyGrid,
    sgrid: &SpatialGrid,
    columns: &Columns,
    source: &S,
) -> Vec<Vec<Vec<Complex64>>> {
    let nc = source.components();
    let batch = columns.batch;
    let lams = fgrid.radial_nodes();
    let nodes = fgrid.angular_nodes();
    let per_point: Vec<Vec<Complex64>> = sgrid
        .points()
        .par_iter()
        .enumerate()
        .map(|(ix, x)| {
            let mut out = vec![Complex64::new(0.0, 0.0); batch * nc];
            let mut sym = vec![Complex64::new(0.0, 0.0); nc];
            let mut sums = vec![Complex64::new(0.0, 0.0); batch];
            for col in &columns.cols {
                let w = &nodes[col.ia];
                let t = source.eval(ix, x, col.ia, w, &mut sym);
                let len = col.r1 - col.r0;
                let l = &lams[col.r0..col.r1];
                if batch == 1 {
                    sums[0] = radial_sum(l, &columns.data[col.offset..col.offset + len], t);
                } else {
                    radial_sum_batch(l, &columns.data[col.offset..col.offset + batch * len], len, t, &mut sums);
                }
                for b in 0..batch {
                    for c in 0..nc {
                        out[b * nc + c] += sym[c] * sums[b];
                    }
                }
            }
            out
        })
        .collect();
    let n_x = sgrid.len();
    let mut result = vec![vec![vec![Complex64::new(0.0, 0.0); n_x]; nc]; batch];
    for (ix, vals) in per_point.into_iter().enumerate() {
        for b in 0..batch {
            for c in 0..nc {
                result[b][c][ix] = vals[b * nc + c];
            }
        }
    }
    result
}

/// Adjoint sums. `fields[b][c]` are the spatial inputs; the result holds one
/// density per batch member, evaluated on angular nodes where `active(ia)`
/// and zero elsewhere.
pub fn adjoint<S: Source>(
    fgrid: &PolarFrequencyGrid,
    sgrid: &SpatialGrid,
    fields: &[Vec<&[Complex64]>],
    source: &S,
    active: impl Fn(usize) -> bool + Sync,
) -> Vec<HalfDensity> {
    let nc = source.components();
    let batch = fields.len();
    let n_r = fgrid.n_radial();
    let lams = fgrid.radial_nodes();
    let pts = sgrid.points();
    let wts = sgrid.weights();
    let per_node: Vec<Vec<Complex64>> = fgrid
        .angular_nodes()
        .par_iter()
        .enumerate()
        .map(|(ia, w)| {
            let mut acc = vec![Complex64::new(0.0, 0.0); batch * n_r];
            if !active(ia) {
                return acc;
            }
            let mut sym = vec![Complex64::new(0.0, 0.0); nc];
            let mut wb = vec![Complex64::new(0.0, 0.0); batch];
            for (ix, x) in pts.iter().enumerate() {
                let t = source.eval(ix, x, ia, w, &mut sym);
                let mut any = false;
                for b in 0..batch {
                    let mut s = Complex64::new(0.0, 0.0);
                    for c in 0..nc {
                        s += sym[c].conj() * fields[b][c][ix];
                    }
                    wb[b] = s * wts[ix];
                    any |= wb[b].re != 0.0 || wb[b].im != 0.0;
                }
                if !any {
                    continue;
                }
                if batch == 1 {
                    radial_scatter(lams, t, wb[0], &mut acc);
                } else {
                    radial_scatter_batch(lams, t, &wb, &mut acc, n_r);
                }
            }
            acc
        })
        .collect();
    (0..batch)
        .map(|b| {
            let mut values = Vec::with_capacity(fgrid.len());
            for acc in &per_node {
                values.extend_from_slice(&acc[b * n_r..(b + 1) * n_r]);
            }
            HalfDensity::from_values(fgrid, values).expect("layout matches grid")
        })
        .collect()
}
