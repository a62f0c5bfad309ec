//! Discrete Fourier tools on the cubic lattice: 3-D FFT, wavenumbers,
//! spectral gradients, radial filters and exact free-wave propagation.

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::grid::Lattice;

/// In-place 3-D DFT of an n³ array in lattice order. The inverse transform
/// includes the 1/n³ factor.
pub fn fft3(data: &mut [Complex64], n: usize, inverse: bool) {
    assert_eq!(data.len(), n * n * n);
    let mut planner = FftPlanner::new();
    let fft = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
    // Contiguous axis.
    fft.process(data);
    let mut line = vec![Complex64::new(0.0, 0.0); n];
    // Middle axis.
    for i in 0..n {
        for k in 0..n {
            for j in 0..n {
                line[j] = data[(i * n + j) * n + k];
            }
            fft.process(&mut line);
            for j in 0..n {
                data[(i * n + j) * n + k] = line[j];
            }
        }
    }
    // Slow axis.
    for j in 0..n {
        for k in 0..n {
            for i in 0..n {
                line[i] = data[(i * n + j) * n + k];
            }
            fft.process(&mut line);
            for i in 0..n {
                data[(i * n + j) * n + k] = line[i];
            }
        }
    }
    if inverse {
        let s = 1.0 / (n * n * n) as f64;
        for v in data.iter_mut() {
            *v *= s;
        }
    }
}

/// Angular wavenumber of DFT index i on a lattice with n points per axis.
pub fn wavenumber(i: usize, lat: Lattice) -> f64 {
    let n = lat.n as i64;
    let m = if (i as i64) < (n + 1) / 2 { i as i64 } else { i as i64 - n };
    2.0 * std::f64::consts::PI * m as f64 / (n as f64 * lat.spacing())
}

fn is_nyquist(i: usize, n: usize) -> bool {
    n % 2 == 0 && i == n / 2
}

/// Multiplies the spectrum by m(k) for every wavevector k.
pub fn fourier_multiplier(
    field: &[Complex64],
    lat: Lattice,
    m: impl Fn([f64; 3], [bool; 3]) -> Complex64,
) -> Vec<Complex64> {
    let n = lat.n;
    let mut data = field.to_vec();
    fft3(&mut data, n, false);
    let ks: Vec<f64> = (0..n).map(|i| wavenumber(i, lat)).collect();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let idx = (i * n + j) * n + k;
                let nyq = [is_nyquist(i, n), is_nyquist(j, n), is_nyquist(k, n)];
                data[idx] *= m([ks[i], ks[j], ks[k]], nyq);
            }
        }
    }
    fft3(&mut data, n, true);
    data
}

/// Spectral gradient; the Nyquist mode of each differentiated axis is
/// dropped so real fields stay real.
pub fn gradient(field: &[Complex64], lat: Lattice) -> [Vec<Complex64>; 3] {
    let d = |axis: usize| {
        fourier_multiplier(field, lat, |k, nyq| if nyq[axis] { Complex64::new(0.0, 0.0) } else { Complex64::new(0.0, k[axis]) })
    };
    [d(0), d(1), d(2)]
}

/// Applies a radial multiplier m(|k|).
pub fn radial_filter(field: &[Complex64], lat: Lattice, m: impl Fn(f64) -> f64) -> Vec<Complex64> {
    fourier_multiplier(field, lat, |k, _| Complex64::new(m((k[0] * k[0] + k[1] * k[1] + k[2] * k[2]).sqrt()), 0.0))
}

/// Free-wave solution at time t: cos(t|k|)φ̂₀ + sin(t|k|)/|k| φ̂₁.
pub fn wave_evolve(phi0: &[Complex64], phi1: &[Complex64], lat: Lattice, t: f64) -> Vec<Complex64> {
    let a = radial_filter(phi0, lat, |k| (t * k).cos());
    let b = radial_filter(phi1, lat, |k| if k == 0.0 { t } else { (t * k).sin() / k });
    a.iter().zip(&b).map(|(x, y)| x + y).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fft_roundtrip_and_gradient() {
        let lat = Lattice { half_width: 7.0, n: 32 };
        let n = lat.n;
        let mut f = Vec::new();
        let mut dfx = Vec::new();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let (x, y, z) = (lat.coordinate(i), lat.coordinate(j), lat.coordinate(k));
                    let g = (-(x * x + y * y + z * z) / 2.0).exp();
                    f.push(Complex64::new(g, 0.0));
                    dfx.push(-x * g);
                }
            }
        }
        let mut r = f.clone();
        fft3(&mut r, n, false);
        fft3(&mut r, n, true);
        let err = r.iter().zip(&f).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-12);
        let g = gradient(&f, lat);
        let err = g[0].iter().zip(&dfx).map(|(a, b)| (a.re - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }
}
