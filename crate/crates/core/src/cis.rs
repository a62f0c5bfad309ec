//! Branch-free e^{ix} and the radial inner loops of the synthesis engine.
//!
//! The polynomial kernel has a maximum error of about 1e-13 for |x| < 2000,
//! well below the quadrature error of any grid used here.

use num_complex::Complex64;

const TWO_OVER_PI: f64 = 0.636_619_772_367_581_4;
const PIO2_HI: f64 = 1.570_796_326_794_896_558e0;
const PIO2_LO: f64 = 6.123_233_995_736_766e-17;
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0;

/// Returns (cos x, sin x).
#[inline(always)]
pub fn cis(x: f64) -> (f64, f64) {
    let qm = x * TWO_OVER_PI + ROUND_MAGIC;
    let q = qm - ROUND_MAGIC;
    let quadrant = qm.to_bits();
    let r = (x - q * PIO2_HI) - q * PIO2_LO;
    let r2 = r * r;
    let s = r
        + r * r2
            * (-1.666_666_666_666_663_24e-1
                + r2 * (8.333_333_333_322_489_46e-3
                    + r2 * (-1.984_126_982_985_795_0e-4
                        + r2 * (2.755_731_370_707_006_8e-6
                            + r2 * (-2.505_076_025_340_686_3e-8 + r2 * 1.589_690_995_211_55e-10)))));
    let c = 1.0 - 0.5 * r2
        + r2 * r2
            * (4.166_666_666_666_660_19e-2
                + r2 * (-1.388_888_888_887_410_96e-3
                    + r2 * (2.480_158_728_947_672_9e-5
                        + r2 * (-2.755_731_435_139_066_3e-7
                            + r2 * (2.087_572_321_298_174_8e-9 + r2 * -1.135_964_755_778_819_5e-11)))));
    let (c1, s1) = if quadrant & 1 == 1 { (s, c) } else { (c, s) };
    let neg_c = ((quadrant + 1) & 2) << 62;
    let neg_s = (quadrant & 2) << 62;
    (f64::from_bits(c1.to_bits() ^ neg_c), f64::from_bits(s1.to_bits() ^ neg_s))
}

/// Σ_k e^{i λ_k t} c_k.
#[inline]
pub fn radial_sum(lams: &[f64], coeffs: &[Complex64], t: f64) -> Complex64 {
    debug_assert_eq!(lams.len(), coeffs.len());
    let mut re = [0.0f64; 4];
    let mut im = [0.0f64; 4];
    let chunks = lams.len() / 4;
    for q in 0..chunks {
        let l = &lams[4 * q..4 * q + 4];
        let c = &coeffs[4 * q..4 * q + 4];
        for m in 0..4 {
            let (co, si) = cis(l[m] * t);
            re[m] += co * c[m].re - si * c[m].im;
            im[m] += co * c[m].im + si * c[m].re;
        }
    }
    for k in 4 * chunks..lams.len() {
        let (co, si) = cis(lams[k] * t);
        re[0] += co * coeffs[k].re - si * coeffs[k].im;
        im[0] += co * coeffs[k].im + si * coeffs[k].re;
    }
    Complex64::new((re[0] + re[1]) + (re[2] + re[3]), (im[0] + im[1]) + (im[2] + im[3]))
}

/// out[b] = Σ_k e^{i λ_k t} coeffs[b·stride + k] for every batch member b.
#[inline]
pub fn radial_sum_batch(lams: &[f64], coeffs: &[Complex64], stride: usize, t: f64, out: &mut [Complex64]) {
    const BLOCK: usize = 32;
    let n = lams.len();
    for o in out.iter_mut() {
        *o = Complex64::new(0.0, 0.0);
    }
    let mut phases = [(0.0f64, 0.0f64); BLOCK];
    let mut start = 0;
    while start < n {
        let len = BLOCK.min(n - start);
        for (p, l) in phases[..len].iter_mut().zip(&lams[start..start + len]) {
            *p = cis(l * t);
        }
        for (b, o) in out.iter_mut().enumerate() {
            let c = &coeffs[b * stride + start..b * stride + start + len];
            let (mut re, mut im) = (0.0, 0.0);
            for (p, ck) in phases[..len].iter().zip(c) {
                re += p.0 * ck.re - p.1 * ck.im;
                im += p.0 * ck.im + p.1 * ck.re;
            }
            o.re += re;
            o.im += im;
        }
        start += len;
    }
}

/// acc[k] += w · e^{−i λ_k t}.
#[inline]
pub fn radial_scatter(lams: &[f64], t: f64, w: Complex64, acc: &mut [Complex64]) {
    for (a, l) in acc.iter_mut().zip(lams) {
        let (co, si) = cis(l * t);
        a.re += co * w.re + si * w.im;
        a.im += co * w.im - si * w.re;
    }
}

/// acc[b·stride + k] += w[b] · e^{−i λ_k t} for every batch member b.
#[inline]
pub fn radial_scatter_batch(lams: &[f64], t: f64, w: &[Complex64], acc: &mut [Complex64], stride: usize) {
    const BLOCK: usize = 32;
    let n = lams.len();
    let mut phases = [(0.0f64, 0.0f64); BLOCK];
    let mut start = 0;
    while start < n {
        let len = BLOCK.min(n - start);
        for (p, l) in phases[..len].iter_mut().zip(&lams[start..start + len]) {
            *p = cis(l * t);
        }
        for (b, wb) in w.iter().enumerate() {
            if wb.re == 0.0 && wb.im == 0.0 {
                continue;
            }
            let a = &mut acc[b * stride + start..b * stride + start + len];
            for (ak, p) in a.iter_mut().zip(&phases[..len]) {
                ak.re += p.0 * wb.re + p.1 * wb.im;
                ak.im += p.0 * wb.im - p.1 * wb.re;
            }
        }
        start += len;
    }
}
