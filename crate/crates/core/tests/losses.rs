use efficientface::losses::{
    focal_logit, focal_loss, focal_term, focal_term_grad, sigmoid, smooth_l1, smooth_l1_grad, smooth_l1_scalar,
    total_loss, LossConfig,
};
use proptest::prelude::*;

fn cfg() -> LossConfig {
    LossConfig::default()
}

#[test]
fn focal_scalar_cases() {
    let c = cfg();
    let want = 0.25 * 0.25 * std::f64::consts::LN_2;
    assert!((focal_term(0.5, 1, &c).unwrap() - want).abs() < 1e-12);
    assert!((focal_term(0.5, 1, &c).unwrap() - 0.0433217).abs() < 1e-5);
    let want = 0.75 * 0.81 * 10f64.ln();
    assert!((focal_term(0.9, 0, &c).unwrap() - want).abs() < 1e-12);
    assert!((focal_term(0.9, 0, &c).unwrap() - 1.39882).abs() < 1e-5);
    assert!(focal_term(1.0 - 1e-12, 1, &c).unwrap() < 1e-12);
}

#[test]
fn focal_reduces_to_half_cross_entropy() {
    let c = LossConfig {
        gamma: 0.0,
        alpha_t: 0.5,
        ..cfg()
    };
    for &p in &[0.01, 0.2, 0.5, 0.73, 0.999] {
        assert!((focal_term(p, 1, &c).unwrap() + 0.5 * p.ln()).abs() < 1e-9);
        assert!((focal_term(p, 0, &c).unwrap() + 0.5 * (1.0 - p).ln()).abs() < 1e-9);
    }
}

#[test]
fn focal_rejects_bad_labels() {
    assert!(focal_term(0.5, 2, &cfg()).is_err());
}

#[test]
fn focal_loss_normalizes_by_positives() {
    let c = cfg();
    let p = [0.5, 0.9, 0.2];
    let y = [1, 0, 0];
    let sum: f64 = p.iter().zip(&y).map(|(&p, &y)| focal_term(p, y, &c).unwrap()).sum();
    assert!((focal_loss(&p, &y, &c).unwrap() - sum).abs() < 1e-15);
    let none = focal_loss(&[0.1, 0.2], &[0, 0], &c).unwrap();
    assert!((none - focal_term(0.1, 0, &c).unwrap() - focal_term(0.2, 0, &c).unwrap()).abs() < 1e-15);
}

#[test]
fn smooth_l1_cases() {
    assert_eq!(smooth_l1_scalar(0.0), 0.0);
    assert!((smooth_l1_scalar(0.5) - 0.125).abs() < 1e-12);
    assert!((smooth_l1_scalar(2.0) - 1.5).abs() < 1e-12);
    assert_eq!(smooth_l1_scalar(1.0), 0.5);
    assert!((smooth_l1_scalar(1.0 - 1e-12) - 0.5).abs() < 1e-11);
    assert_eq!(smooth_l1_grad(1.0), 1.0);
    assert!((smooth_l1_grad(1.0 - 1e-12) - 1.0).abs() < 1e-11);
    let v = smooth_l1(&[[0.5, 0.0, 0.0, 2.0], [0.0; 4]], &[[0.0; 4], [0.0; 4]]).unwrap();
    assert!((v - (0.125 + 1.5) / 2.0).abs() < 1e-12);
}

#[test]
fn total_loss_cases() {
    let c = cfg();
    assert_eq!(total_loss(0.5, 0.25, 3, &c).unwrap().total, 0.75);
    let c2 = LossConfig { lambda: 2.0, ..cfg() };
    assert_eq!(total_loss(0.5, 0.25, 3, &c2).unwrap().total, 1.0);
    assert_eq!(smooth_l1(&[], &[]).unwrap(), 0.0);
    assert!(total_loss(f64::NAN, 0.0, 0, &c).is_err());
}

fn central(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / n.abs().max(1e-8)
}

#[test]
fn focal_gradients_match_finite_differences() {
    for c in [
        cfg(),
        LossConfig {
            gamma: 0.0,
            alpha_t: 0.5,
            ..cfg()
        },
        LossConfig {
            gamma: 1.5,
            alpha_t: 0.7,
            ..cfg()
        },
    ] {
        for y in [0u8, 1] {
            for &p in &[0.03, 0.3, 0.5, 0.8, 0.97] {
                let n = central(|q| focal_term(q, y, &c).unwrap(), p, 1e-6);
                assert!(rel(focal_term_grad(p, y, &c).unwrap(), n) < 1e-5, "p {p} y {y}");
            }
            for &z in &[-4.0, -0.7, 0.0, 1.3, 5.0] {
                let n = central(|q| focal_term(sigmoid(q), y, &c).unwrap(), z, 1e-6);
                assert!(rel(focal_logit(z, y, &c).unwrap().1, n) < 1e-5, "z {z} y {y}");
            }
        }
    }
}

#[test]
fn smooth_l1_gradient_including_seam() {
    for &x in &[-3.0, -1.0, -0.999, -0.3, 0.0, 0.4, 0.999, 1.0, 1.001, 2.5] {
        let n = central(smooth_l1_scalar, x, 1e-7);
        let a = smooth_l1_grad(x);
        assert!((a - n).abs() < 1e-5 * a.abs().max(1.0), "x {x}: {a} vs {n}");
    }
}

proptest! {
    #[test]
    fn focal_is_nonnegative_and_decreasing_in_confidence(p in 0.001..0.999f64, gamma in 0.0..5.0f64, alpha in 0.01..0.99f64) {
        let c = LossConfig { gamma, alpha_t: alpha, lambda: 1.0 };
        let pos = focal_term(p, 1, &c).unwrap();
        prop_assert!(pos >= 0.0);
        prop_assert!(focal_term((p + 0.0005).min(0.9999), 1, &c).unwrap() <= pos + 1e-15);
    }

    #[test]
    fn focal_never_exceeds_weighted_cross_entropy(p in 0.001..0.999f64, gamma in 0.0..5.0f64) {
        let c = LossConfig { gamma, ..cfg() };
        prop_assert!(focal_term(p, 1, &c).unwrap() <= -c.alpha_t * p.ln() + 1e-15);
    }

    #[test]
    fn smooth_l1_is_continuous(x in -5.0..5.0f64) {
        let h = 1e-9;
        prop_assert!((smooth_l1_scalar(x + h) - smooth_l1_scalar(x)).abs() < 1e-8);
        prop_assert!(smooth_l1_scalar(x) <= x.abs());
    }
}
