mod common;

use common::{matrix, simpson};
use deliberant::math::*;
use deliberant::training::{composite_reward, compute_advantages};
use proptest::prelude::*;

const TOL: f64 = 1e-6;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn frobenius_cosine_examples() {
    let e = matrix(&[&[1.0, 0.0]]);
    assert!(close(frobenius_cosine(&e, &e).unwrap(), 1.0, TOL));
    assert!(close(frobenius_cosine(&e, &matrix(&[&[0.0, 1.0]])).unwrap(), 0.0, TOL));
    assert!(close(frobenius_cosine(&e, &matrix(&[&[-1.0, 0.0]])).unwrap(), -1.0, TOL));
    // oracle: (3·3 + 4·4) / (5·5)
    let oracle = (3.0 * 3.0 + 4.0 * 4.0) / (5.0 * 5.0);
    let m = matrix(&[&[3.0, 4.0]]);
    assert!(close(oracle, 1.0, 1e-12));
    assert!(close(frobenius_cosine(&m, &m).unwrap(), oracle, TOL));
}

#[test]
fn fact_score_examples() {
    let v = matrix(&[&[1.0, 0.0]]);
    assert!(close(fact_score(&v, &[v.clone()]).unwrap().value(), 1.0, TOL));

    // oracle: mean of max(0, cos) over the evidence set
    let evidence = [matrix(&[&[1.0, 0.0]]), matrix(&[&[0.0, 1.0]])];
    let cosines = [1.0f64, 0.0];
    let oracle = cosines.iter().map(|c| c.max(0.0)).sum::<f64>() / 2.0;
    assert!(close(oracle, 0.5, 1e-12));
    assert!(close(fact_score(&v, &evidence).unwrap().value(), oracle, TOL));

    let oracle = (-1.0f64).max(0.0);
    assert!(close(fact_score(&v, &[matrix(&[&[-1.0, 0.0]])]).unwrap().value(), oracle, TOL));
}

#[test]
fn coherence_squash_examples() {
    assert!(close(squash_coherence(0.0, 1.0, 0.0).value(), 0.5, TOL));
    for x in [-7.0, 0.3, 42.0] {
        assert!(close(squash_coherence(x, 0.0, 0.0).value(), 0.5, TOL));
    }
    let oracle = 1.0 / (1.0 + (-2.0f64).exp());
    assert!(close(oracle, 0.8808, 1e-4));
    assert!(close(squash_coherence(2.0, 1.0, 0.0).value(), oracle, TOL));
}

#[test]
fn retrieval_softmax_examples() {
    let p = softmax_with_temperature(&[0.5, 0.5], 1.5);
    assert!(close(p[0], 0.5, TOL) && close(p[1], 0.5, TOL));

    let e = 1.5f64.exp();
    let oracle = [e / (e + 1.0), 1.0 / (e + 1.0)];
    assert!(close(oracle[0], 0.8176, 1e-4) && close(oracle[1], 0.1824, 1e-4));
    let p = softmax_with_temperature(&[1.0, 0.0], 1.5);
    assert!(close(p[0], oracle[0], TOL) && close(p[1], oracle[1], TOL));

    for alpha in [0.1, 1.5, 30.0] {
        for q in softmax_with_temperature(&[0.2, 0.2, 0.2], alpha) {
            assert!(close(q, 1.0 / 3.0, TOL));
        }
    }
}

#[test]
fn softmax_sharpens_with_alpha() {
    let sims = [0.9, 0.4, 0.1, -0.3];
    let mut last = 0.0;
    for alpha in [0.0, 0.5, 1.0, 1.5, 3.0, 10.0] {
        let top = softmax_with_temperature(&sims, alpha)[0];
        assert!(top >= last);
        last = top;
    }
}

#[test]
fn kl_examples() {
    let std1 = GaussianPolicy::isotropic(1, 0.0, 1.0).unwrap();
    assert!(close(gaussian_kl(&std1, &std1).unwrap(), 0.0, TOL));
    let shifted = GaussianPolicy::isotropic(1, 1.0, 1.0).unwrap();
    let oracle = 0.5 * 1.0f64.powi(2);
    assert!(close(gaussian_kl(&shifted, &std1).unwrap(), oracle, TOL));
    let std2 = GaussianPolicy::isotropic(2, 0.0, 1.0).unwrap();
    assert!(close(gaussian_kl(&std2, &std2).unwrap(), 0.0, TOL));
}

#[test]
fn entropy_examples() {
    let oracle = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    assert!(close(oracle, 1.41894, 1e-5));
    let p = GaussianPolicy::isotropic(1, 0.0, 1.0).unwrap();
    assert!(close(gaussian_entropy(&p), oracle, TOL));

    let base = GaussianPolicy::new(vec![0.0; 3], vec![0.5, 1.0, 2.0]).unwrap();
    let doubled = GaussianPolicy::new(vec![0.0; 3], vec![0.5, 2.0, 2.0]).unwrap();
    let oracle = 0.5 * 2.0f64.ln();
    assert!(close(oracle, 0.3466, 1e-4));
    assert!(close(gaussian_entropy(&doubled) - gaussian_entropy(&base), oracle, TOL));

    let moved = GaussianPolicy::new(vec![5.0, -2.0, 0.1], vec![0.5, 1.0, 2.0]).unwrap();
    assert!(close(gaussian_entropy(&moved), gaussian_entropy(&base), 1e-12));
}

#[test]
fn log_prob_examples() {
    let p = GaussianPolicy::isotropic(1, 0.0, 1.0).unwrap();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    assert!(close(-0.5 * ln2pi, -0.91894, 1e-5));
    assert!(close(gaussian_log_prob(&p, &[0.0]).unwrap(), -0.5 * ln2pi, TOL));
    assert!(close(gaussian_log_prob(&p, &[1.0]).unwrap(), -0.5 * ln2pi - 0.5, TOL));
}

#[test]
fn entropy_matches_quadrature_in_one_dimension() {
    for var in [0.01, 0.25, 1.0, 4.0] {
        let p = GaussianPolicy::isotropic(1, 0.3, var).unwrap();
        let sd = f64::sqrt(var);
        let integrand = |x: f64| {
            let lp = gaussian_log_prob(&p, &[x]).unwrap();
            -lp.exp() * lp
        };
        let numeric = simpson(integrand, 0.3 - 12.0 * sd, 0.3 + 12.0 * sd, 4000);
        assert!(close(numeric, gaussian_entropy(&p), 1e-3), "var {var}: {numeric}");
    }
}

#[test]
fn reward_examples() {
    let p = GaussianPolicy::isotropic(3, 0.0, 1.0).unwrap();
    let r = composite_reward(ScoreUnit::ONE, ScoreUnit::ONE, &p, &p, 0.6, 0.1).unwrap();
    assert!(close(r.total, 1.0, TOL));

    let oracle = 0.6 * 0.8 + 0.4 * 0.5;
    let r = composite_reward(ScoreUnit::new(0.8).unwrap(), ScoreUnit::new(0.5).unwrap(), &p, &p, 0.6, 0.1).unwrap();
    assert!(close(r.total, oracle, TOL));
    assert!(close(oracle, 0.68, 1e-12));

    // a pair with KL exactly 1: one coordinate shifted by sqrt(2)
    let q = GaussianPolicy::isotropic(1, 0.0, 1.0).unwrap();
    let shifted = GaussianPolicy::isotropic(1, 2f64.sqrt(), 1.0).unwrap();
    let r = composite_reward(ScoreUnit::ZERO, ScoreUnit::ZERO, &shifted, &q, 0.6, 0.1).unwrap();
    assert!(close(r.kl, 1.0, 1e-12));
    assert!(close(r.total, -0.1, TOL));
}

#[test]
fn advantage_examples() {
    assert!(compute_advantages(&[0.4; 6]).iter().all(|a| *a == 0.0));
    let a = compute_advantages(&[1.0, 0.0]);
    assert!(close(a[0], 1.0, 1e-12) && close(a[1], -1.0, 1e-12));
}

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, len)
}

fn nonzero_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    finite_vec(len).prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
}

fn policy(len: usize) -> impl Strategy<Value = GaussianPolicy> {
    (finite_vec(len), prop::collection::vec(0.01f64..4.0, len))
        .prop_map(|(m, v)| GaussianPolicy::new(m, v).unwrap())
}

proptest! {
    #[test]
    fn frobenius_cosine_is_bounded_and_symmetric(a in nonzero_vec(6), b in nonzero_vec(6)) {
        let (ma, mb) = (matrix(&[&a]), matrix(&[&b]));
        let ab = frobenius_cosine(&ma, &mb).unwrap();
        let ba = frobenius_cosine(&mb, &ma).unwrap();
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn fact_score_stays_in_unit_interval(v in nonzero_vec(4), ev in prop::collection::vec(nonzero_vec(4), 1..6)) {
        let evidence: Vec<_> = ev.iter().map(|e| matrix(&[e])).collect();
        for mapping in [SupportMapping::Clamp, SupportMapping::Rescale] {
            let s = fact_score_with(&matrix(&[&v]), &evidence, mapping).unwrap().value();
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn softmax_is_a_distribution(sims in prop::collection::vec(-1.0f64..1.0, 1..40), alpha in 0.0f64..50.0, shift in -3.0f64..3.0) {
        let p = softmax_with_temperature(&sims, alpha);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|x| *x >= 0.0));
        let shifted: Vec<f64> = sims.iter().map(|s| s + shift).collect();
        let q = softmax_with_temperature(&shifted, alpha);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_self(p in policy(3), q in policy(3)) {
        prop_assert!(gaussian_kl(&p, &q).unwrap() >= 0.0);
        prop_assert!(gaussian_kl(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn log_prob_peaks_at_the_mean(p in policy(3), x in finite_vec(3)) {
        let at_mean = gaussian_log_prob(&p, p.mean()).unwrap();
        prop_assert!(at_mean >= gaussian_log_prob(&p, &x).unwrap());
    }

    #[test]
    fn variance_floor_holds(m in finite_vec(3), v in prop::collection::vec(0.0f64..1e-5, 3)) {
        let p = GaussianPolicy::new(m, v).unwrap();
        prop_assert!(p.variance().iter().all(|x| *x >= VARIANCE_FLOOR));
    }

    #[test]
    fn squashed_coherence_is_a_score(raw in -50.0f64..50.0, w in -10.0f64..10.0, b in -10.0f64..10.0) {
        let s = squash_coherence(raw, w, b).value();
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn reward_is_the_weighted_blend(f in 0.0f64..1.0, c in 0.0f64..1.0, lambda in 0.0f64..1.0, gamma in 0.0f64..1.0, p in policy(2), q in policy(2)) {
        let r = composite_reward(ScoreUnit::new(f).unwrap(), ScoreUnit::new(c).unwrap(), &p, &q, lambda, gamma).unwrap();
        let kl = gaussian_kl(&p, &q).unwrap();
        prop_assert!((r.total - (lambda * f + (1.0 - lambda) * c - gamma * kl)).abs() < 1e-12);
    }

    #[test]
    fn advantages_are_centred(r in prop::collection::vec(-10.0f64..10.0, 1..64)) {
        let a = compute_advantages(&r);
        prop_assert!(a.iter().sum::<f64>().abs() / (a.len() as f64) < 1e-9);
    }
}
