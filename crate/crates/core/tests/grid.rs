use parafio::grid::*;
use parafio::phase::PhaseField;
use parafio::{Complex64, Vector3};
use proptest::prelude::*;
use std::f64::consts::PI;

/// Composite Simpson rule on [a, b] with `n` (even) panels.
fn simpson(a: f64, b: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n).map(|i| f(a + h * i as f64) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
    (f(a) + f(b) + inner) * h / 3.0
}

#[test]
fn log_grid_layout() {
    let g = PolarFrequencyGrid::build(0, 3, 8, 64).unwrap();
    assert_eq!(g.n_radial(), 32);
    assert_eq!(g.radial_nodes()[0], 0.5);
    assert_eq!(*g.radial_nodes().last().unwrap(), 16.0);
    assert!(g.radial_nodes().windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn angular_moments() {
    let g = PolarFrequencyGrid::build(0, 1, 4, 4096).unwrap();
    let total: f64 = g.angular_weights().iter().sum();
    assert!((total - 4.0 * PI).abs() <= 1e-10 * 4.0 * PI);
    let second: f64 = g.angular_nodes().iter().zip(g.angular_weights()).map(|(w, a)| w.z * w.z * a).sum();
    assert!((second - 4.0 * PI / 3.0).abs() <= 1e-3, "{second}");
}

#[test]
fn zero_density_has_zero_norm() {
    let g = PolarFrequencyGrid::build(-1, 1, 4, 64).unwrap();
    assert_eq!(polar_l2_norm(&HalfDensity::zeros(&g), &g).unwrap(), 0.0);
}

#[test]
fn constant_density_on_an_interval() {
    let (nodes, weights) = log_trapezoid(1.0, 2.0, 400);
    let g = PolarFrequencyGrid::from_parts(nodes, weights, fibonacci_sphere(256), vec![4.0 * PI / 256.0; 256], (0, 0))
        .unwrap();
    let f = HalfDensity::from_fn(&g, |_, _| Complex64::new(1.0, 0.0));
    let expected = (4.0 * PI * 7.0 / 3.0).sqrt();
    let got = polar_l2_norm(&f, &g).unwrap();
    assert!((got - expected).abs() <= 1e-4 * expected, "{got} vs {expected}");
}

#[test]
fn gaussian_norm_matches_simpson() {
    let g = PolarFrequencyGrid::build(-4, 2, 64, 64).unwrap();
    let (a, b) = (g.radial_nodes()[0], *g.radial_nodes().last().unwrap());
    let f = HalfDensity::from_fn(&g, |l, _| Complex64::new((-l * l / 2.0).exp(), 0.0));
    let oracle = (4.0 * PI * simpson(a, b, 200_000, |l| (-l * l).exp() * l * l)).sqrt();
    let got = polar_l2_norm(&f, &g).unwrap();
    assert!((got - oracle).abs() <= 1e-4 * oracle, "{got} vs {oracle}");
}

#[test]
fn refinement_changes_smooth_norms_little() {
    let g = PolarFrequencyGrid::build(-2, 2, 8, 512).unwrap();
    let profile = |l: f64, w: &Vector3<f64>| Complex64::new((-l * l / 4.0).exp() * (1.0 + 0.5 * w.x), 0.3 * w.z);
    let coarse = polar_l2_norm(&HalfDensity::from_fn(&g, profile), &g).unwrap();
    let fine_grid = g.refined().unwrap();
    let fine = polar_l2_norm(&HalfDensity::from_fn(&fine_grid, profile), &fine_grid).unwrap();
    assert!((coarse - fine).abs() <= 0.01 * fine, "{coarse} vs {fine}");
}

#[test]
fn ball_constant_field() {
    let r = 1.7;
    let b = SpatialGrid::ball(r, 16, 400).unwrap();
    let f = SpatialField::from_fn(&b, |_| Complex64::new(1.0, 0.0));
    let expected = (4.0 * PI * r.powi(3) / 3.0).sqrt();
    let got = spatial_l2_norm(&f, &b).unwrap();
    assert!((got - expected).abs() <= 1e-8 * expected);
}

#[test]
fn spatial_norm_is_the_weighted_sum() {
    let g = SpatialGrid::lattice(2.0, 6).unwrap();
    let f = SpatialField::from_fn(&g, |x| Complex64::new(x.x.sin(), x.y * x.z));
    let brute: f64 = g
        .points()
        .iter()
        .zip(g.weights())
        .map(|(x, w)| (x.x.sin().powi(2) + (x.y * x.z).powi(2)) * w)
        .sum::<f64>()
        .sqrt();
    let got = spatial_l2_norm(&f, &g).unwrap();
    assert!((got - brute).abs() <= 1e-12 * brute);
}

#[test]
fn mixed_sup_over_slabs_of_a_ball_indicator() {
    let r = 1.0;
    let b = SpatialGrid::ball(r, 24, 2000).unwrap();
    let f = SpatialField::from_fn(&b, |_| Complex64::new(1.0, 0.0));
    let got = mixed_norm(&f, &b, &PhaseField::flat(), &Vector3::z(), Exponent::Infinity, Exponent::Two, 0.1).unwrap();
    let expected = r * PI.sqrt();
    assert!((got - expected).abs() <= 0.05 * expected, "{got} vs {expected}");
}

#[test]
fn mixed_two_two_equals_l2_for_the_flat_phase() {
    let g = SpatialGrid::lattice(2.0, 8).unwrap();
    let f = SpatialField::from_fn(&g, |x| Complex64::new((-x.norm_squared()).exp(), x.x));
    let l2 = spatial_l2_norm(&f, &g).unwrap();
    for w in [Vector3::z(), Vector3::new(1.0, 2.0, -0.5).normalize()] {
        let m = mixed_norm(&f, &g, &PhaseField::flat(), &w, Exponent::Two, Exponent::Two, g.default_slab_width())
            .unwrap();
        assert!((m - l2).abs() <= 1e-12 * l2, "{m} vs {l2}");
    }
}

#[test]
fn mixed_sup_of_a_single_slab_field() {
    let g = SpatialGrid::lattice(2.0, 8).unwrap();
    let width = g.default_slab_width();
    let in_slab = |x: &Vector3<f64>| x.z >= 0.0 && x.z < width;
    let f = SpatialField::from_fn(&g, |x| Complex64::new(if in_slab(x) { 1.0 + x.x * x.x } else { 0.0 }, 0.0));
    let slab: f64 = g
        .points()
        .iter()
        .zip(g.weights())
        .filter(|(x, _)| in_slab(x))
        .map(|(x, w)| (1.0 + x.x * x.x).powi(2) * w / width)
        .sum::<f64>()
        .sqrt();
    let got = mixed_norm(&f, &g, &PhaseField::flat(), &Vector3::z(), Exponent::Infinity, Exponent::Two, width).unwrap();
    assert!((got - slab).abs() <= 1e-12 * slab);
}

#[test]
fn mixed_norm_rejects_bad_input() {
    let g = SpatialGrid::lattice(1.0, 4).unwrap();
    let f = SpatialField::zeros(g.len());
    let flat = PhaseField::flat();
    assert!(mixed_norm(&f, &g, &flat, &Vector3::z(), Exponent::Two, Exponent::Two, 0.0).is_err());
    assert!(mixed_norm(&SpatialField::zeros(3), &g, &flat, &Vector3::z(), Exponent::Two, Exponent::Two, 0.5).is_err());
}

#[test]
fn array_roundtrip() {
    let header = ArrayHeader { kind: "density".into(), shape: vec![2, 3], grid_hash: "abc".into() };
    let data: Vec<Complex64> = (0..6).map(|i| Complex64::new(i as f64, -0.5 * i as f64)).collect();
    let mut buf = Vec::new();
    write_array(&mut buf, &header, &data).unwrap();
    let (h, d) = read_array(&buf[..]).unwrap();
    assert_eq!(h, header);
    assert_eq!(d, data);
    assert!(read_array(&buf[..buf.len() - 1]).is_err());
}

proptest! {
    #[test]
    fn polar_norm_is_homogeneous(re in -5.0f64..5.0, im in -5.0f64..5.0) {
        let g = PolarFrequencyGrid::build(-1, 1, 4, 64).unwrap();
        let f = HalfDensity::from_fn(&g, |l, w| Complex64::new(l.sin(), w.y));
        let mut cf = f.clone();
        let c = Complex64::new(re, im);
        cf.scale(c);
        let (a, b) = (polar_l2_norm(&cf, &g).unwrap(), polar_l2_norm(&f, &g).unwrap());
        prop_assert!((a - c.norm() * b).abs() <= 1e-12 * (1.0 + a));
    }

    #[test]
    fn spatial_and_mixed_norms_are_homogeneous(c in -5.0f64..5.0, v in prop::array::uniform3(-1.0f64..1.0)) {
        let w = Vector3::from(v);
        prop_assume!(w.norm() > 1e-3);
        let w = w.normalize();
        let g = SpatialGrid::lattice(1.5, 6).unwrap();
        let f = SpatialField::from_fn(&g, |x| Complex64::new(x.y.cos(), x.x));
        let cf = f.scaled(Complex64::new(c, 0.0));
        let s = spatial_l2_norm(&f, &g).unwrap();
        prop_assert!((spatial_l2_norm(&cf, &g).unwrap() - c.abs() * s).abs() <= 1e-12 * (1.0 + s));
        let phase = PhaseField::standard(0.05).unwrap();
        for (p, q) in [(Exponent::Two, Exponent::Two), (Exponent::Infinity, Exponent::Two), (Exponent::Two, Exponent::Infinity)] {
            let m = mixed_norm(&f, &g, &phase, &w, p, q, 0.5).unwrap();
            let mc = mixed_norm(&cf, &g, &phase, &w, p, q, 0.5).unwrap();
            prop_assert!((mc - c.abs() * m).abs() <= 1e-12 * (1.0 + mc));
        }
    }
}
