use parafio::grid::{tangent_pair, PolarFrequencyGrid, SpatialGrid};
use parafio::phase::*;
use parafio::{Matrix3, Vector3};
use proptest::prelude::*;

fn unit(v: [f64; 3]) -> Option<Vector3<f64>> {
    let w = Vector3::from(v);
    let n = w.norm();
    (n > 1e-3).then(|| w / n)
}

fn close(a: &Vector3<f64>, b: &Vector3<f64>, tol: f64) -> bool {
    (a - b).norm() <= tol
}

#[test]
fn flat_jet() {
    let flat = PhaseField::flat();
    let w = Vector3::new(0.3, -0.4, 0.866).normalize();
    let x = Vector3::new(0.7, 1.1, -0.2);
    let j = flat.jet(&x, &w).unwrap();
    assert_eq!(j.a, 1.0);
    assert!(close(&j.normal, &w, 1e-15));
    assert!(j.theta.norm() <= 1e-15);
    assert!(close(&j.domega_u, &(x - w * x.dot(&w)), 1e-15));
    assert!((j.u - x.dot(&w)).abs() <= 1e-15);
}

#[test]
fn perturbed_jet_is_flat_outside_the_ball() {
    let p = PhaseField::standard(0.2).unwrap();
    let flat = PhaseField::flat();
    let w = Vector3::new(1.0, 2.0, 2.0) / 3.0;
    for x in [Vector3::new(2.0, 0.0, 0.0), Vector3::new(1.5, 1.5, 0.3), Vector3::new(-3.0, 4.0, 1.0)] {
        let (a, b) = (p.jet(&x, &w).unwrap(), flat.jet(&x, &w).unwrap());
        assert_eq!(a.u, b.u);
        assert!(close(&a.grad_u, &b.grad_u, 0.0));
        assert_eq!(a.theta, b.theta);
        assert!(close(&a.domega_u, &b.domega_u, 1e-15));
    }
}

#[test]
fn theta_matches_differences_of_the_normal() {
    let p = PhaseField::standard(0.1).unwrap();
    let w = Vector3::new(-0.2, 0.5, 0.8).normalize();
    for x in [Vector3::new(0.3, 0.2, -0.1), Vector3::new(-0.9, 0.4, 0.6), Vector3::new(1.2, -0.7, 0.5)] {
        let h = 1e-5;
        let normal = |y: &Vector3<f64>| p.lapse_normal(y, &w).2;
        let mut jac = Matrix3::zeros();
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = h;
            jac.set_column(k, &((normal(&(x + e)) - normal(&(x - e))) / (2.0 * h)));
        }
        let n = normal(&x);
        let pn = Matrix3::identity() - n * n.transpose();
        let fd = pn * jac * pn;
        let theta = p.theta_ambient(&x, &w);
        assert!((fd - theta).norm() <= 1e-7, "{}", (fd - theta).norm());
        assert!((theta - theta.transpose()).norm() <= 1e-14);
        let jet = p.jet(&x, &w).unwrap();
        assert!((jet.theta - jet.theta.transpose()).norm() <= 1e-14);
    }
}

#[test]
fn frame_and_normal_alignment() {
    let p = PhaseField::standard(0.1).unwrap();
    let w = Vector3::new(0.6, 0.0, 0.8);
    let x = Vector3::new(0.5, -0.3, 0.4);
    let j = p.jet(&x, &w).unwrap();
    assert!(close(&(j.grad_u * j.a), &j.normal, 1e-12));
    assert!((j.normal.norm() - 1.0).abs() <= 1e-12);
    assert!(j.frame.0.dot(&j.normal).abs() <= 1e-12 && j.frame.1.dot(&j.normal).abs() <= 1e-12);
}

#[test]
fn flat_change_of_variable_is_the_identity() {
    let flat = PhaseField::flat();
    let w = Vector3::z();
    for x in [Vector3::new(0.1, 0.2, 0.3), Vector3::new(-1.0, 0.5, 1.5)] {
        let c = flat.change_of_variable(&w, &x);
        assert_eq!(c.image, x);
        assert_eq!(c.jacobian_det, 1.0);
        assert!(!c.degenerate);
    }
}

#[test]
fn jacobian_deviation_is_order_epsilon() {
    let w = Vector3::new(0.2, -0.3, 0.9).normalize();
    let worst = |eps: f64| {
        let p = PhaseField::standard(eps).unwrap();
        let mut m: f64 = 0.0;
        for i in 0..8 {
            for k in 0..8 {
                let x = Vector3::new(-1.8 + 0.5 * i as f64, -1.8 + 0.5 * k as f64, 0.3);
                m = m.max((p.change_of_variable(&w, &x).jacobian_det - 1.0).abs());
            }
        }
        m
    };
    let (a, b) = (worst(0.02), worst(0.01));
    assert!(a <= 50.0 * 0.02, "{a}");
    assert!((b / a - 0.5).abs() <= 0.05, "{}", b / a);
}

#[test]
fn domega_matches_geodesic_differences() {
    let p = PhaseField::standard(0.1).unwrap();
    let w = Vector3::new(0.1, 0.7, -0.7).normalize();
    let (e1, e2) = tangent_pair(&w);
    let h = 1e-5;
    for x in [Vector3::new(0.4, -0.2, 0.9), Vector3::new(1.1, 0.3, -0.6)] {
        let d = p.derivatives(&x, &w);
        for e in [e1, e2] {
            let fd = (p.value(&x, &geodesic(&w, &e, h)) - p.value(&x, &geodesic(&w, &e, -h))) / (2.0 * h);
            assert!((fd - d.domega.dot(&e)).abs() <= 1e-8, "{fd} vs {}", d.domega.dot(&e));
        }
        assert!(d.domega.dot(&w).abs() <= 1e-14);
    }
}

#[test]
fn gradient_matches_differences() {
    let p = PhaseField::standard(0.15).unwrap();
    let w = Vector3::new(0.5, 0.5, 0.707).normalize();
    let x = Vector3::new(-0.6, 0.8, 0.9);
    let (_, g) = p.first_order(&x, &w);
    let h = 1e-6;
    for k in 0..3 {
        let mut e = Vector3::zeros();
        e[k] = h;
        let fd = (p.value(&(x + e), &w) - p.value(&(x - e), &w)) / (2.0 * h);
        assert!((fd - g[k]).abs() <= 1e-8);
    }
}

fn small_grids() -> (PolarFrequencyGrid, SpatialGrid) {
    (PolarFrequencyGrid::build(-1, 1, 4, 64).unwrap(), SpatialGrid::lattice(2.5, 10).unwrap())
}

#[test]
fn flat_phase_passes_every_assumption() {
    let (f, s) = small_grids();
    let report = check_assumptions(&PhaseField::flat(), &f, &s, 0.0, CheckOptions { directions: 4, ..Default::default() });
    let failing: Vec<_> = report.items.iter().filter(|i| !i.pass).map(|i| i.label.clone()).collect();
    assert!(report.passed(), "{failing:?}");
}

#[test]
fn epsilon_items_halve_with_epsilon() {
    let (f, s) = small_grids();
    let opts = CheckOptions { directions: 4, ..Default::default() };
    let p = PhaseField::standard(0.04).unwrap();
    let a = check_assumptions(&p, &f, &s, 0.04, opts);
    let b = check_assumptions(&p.with_epsilon(0.02), &f, &s, 0.02, opts);
    let mut seen = 0;
    for item in a.items.iter().filter(|i| i.bound == Bound::Epsilon) {
        let half = b.item(&item.label).unwrap().measured;
        let ratio = half / item.measured;
        assert!((ratio - 0.5).abs() <= 0.1, "{}: {ratio}", item.label);
        seen += 1;
    }
    assert!(seen > 0);
}

#[test]
fn folding_phase_fails_the_determinant_check() {
    let (f, s) = small_grids();
    let p = PhaseField::perturbed(0.6, TrigPolynomial::preset("steep").unwrap()).unwrap();
    let report = check_assumptions(&p, &f, &s, 0.6, CheckOptions { directions: 4, ..Default::default() });
    let det = report.item("min_det").unwrap();
    assert!(det.measured <= 0.0, "{}", det.measured);
    assert!(!det.pass);
    assert!(!report.passed());
}

#[test]
fn negative_epsilon_is_rejected() {
    assert!(PhaseField::standard(-0.1).is_err());
    assert!(PhaseField::standard(f64::NAN).is_err());
}

proptest! {
    #[test]
    fn phase_is_flat_beyond_radius_two(v in prop::array::uniform3(-1.0f64..1.0), r in 2.0f64..6.0, eps in 0.0f64..0.5, d in prop::array::uniform3(-1.0f64..1.0)) {
        prop_assume!(unit(v).is_some() && unit(d).is_some());
        let (w, dir) = (unit(v).unwrap(), unit(d).unwrap());
        let x = dir * r;
        let p = PhaseField::standard(eps).unwrap();
        prop_assert_eq!(p.value(&x, &w), x.dot(&w));
        prop_assert!(close(&p.first_order(&x, &w).1, &w, 0.0));
    }

    #[test]
    fn perturbation_is_bounded_by_epsilon(v in prop::array::uniform3(-1.0f64..1.0), x in prop::array::uniform3(-2.0f64..2.0), eps in 0.0f64..0.5) {
        prop_assume!(unit(v).is_some());
        let w = unit(v).unwrap();
        let x = Vector3::from(x);
        let p = PhaseField::standard(eps).unwrap();
        prop_assert!((p.value(&x, &w) - x.dot(&w)).abs() <= p.perturbation_bound() + 1e-15);
    }

    #[test]
    fn theta_is_symmetric(v in prop::array::uniform3(-1.0f64..1.0), x in prop::array::uniform3(-2.0f64..2.0), eps in 0.0f64..0.2) {
        prop_assume!(unit(v).is_some());
        let w = unit(v).unwrap();
        let x = Vector3::from(x);
        let p = PhaseField::standard(eps).unwrap();
        let j = p.jet(&x, &w).unwrap();
        prop_assert!((j.theta[(0, 1)] - j.theta[(1, 0)]).abs() <= 1e-12);
        prop_assert!((j.normal.norm() - 1.0).abs() <= 1e-12);
    }
}
