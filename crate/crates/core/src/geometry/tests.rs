use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::gradcheck::{check_similarity, random_prototype, GRAD_TOLERANCE};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn random_unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration on P_n.
fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    (1..=n)
        .map(|i| {
            let mut x = (PI * (i as f64 - 0.25) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            (x, 2.0 / ((1.0 - x * x) * dp * dp))
        })
        .collect()
}

// ---------------------------------------------------------------- l2

#[test]
fn l2_peak_and_unit_distance() {
    let z = [0.3, -0.2, 0.9];
    assert!(close(
        l2_similarity(&z, &z, 1e-4).unwrap(),
        (1e4f64).ln(),
        1e-12
    ));
    assert!(close(l2_similarity(&z, &z, 1e-4).unwrap(), 9.21034, 1e-5));
    let p = [1.3, -0.2, 0.9];
    let v = l2_similarity(&z, &p, 1e-4).unwrap();
    assert!(close(v, (2.0f64 / 1.0001).ln(), 1e-12));
    assert!(close(v, 0.69305, 1e-5));
}

#[test]
fn l2_vanishes_from_above_far_away() {
    let mut prev = f64::INFINITY;
    for r in [1.0, 10.0, 100.0, 1e4] {
        let v = l2_similarity(&[r], &[0.0], 1e-4).unwrap();
        assert!(v > 0.0 && v < prev);
        prev = v;
    }
    assert!(prev < 1e-8);
}

#[test]
fn l2_dimension_mismatch() {
    let err = l2_similarity(&[1.0, 2.0], &[1.0], 1e-4).unwrap_err();
    assert!(matches!(err, crate::Error::DimensionMismatch { .. }));
}

// ---------------------------------------------------------------- cosine / sdot

#[test]
fn cosine_reference_angles() {
    let p = [0.5, -1.0, 2.0];
    assert!(close(cosine_similarity(&p, &p).unwrap(), 1.0, 1e-15));
    let neg: Vec<f64> = p.iter().map(|x| -x).collect();
    assert!(close(cosine_similarity(&neg, &p).unwrap(), -1.0, 1e-15));
    assert!(close(
        cosine_similarity(&[2.0, 1.0, 0.0], &[-1.0, 2.0, 5.0]).unwrap(),
        0.0,
        1e-15
    ));
}

#[test]
fn cosine_zero_norm_is_domain_error() {
    assert!(matches!(
        cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
        Err(crate::Error::Domain(_))
    ));
    assert!(matches!(
        cosine_similarity(&[1.0, 0.0], &[0.0, 0.0]),
        Err(crate::Error::Domain(_))
    ));
}

#[test]
fn scaled_dot_examples() {
    let ones = [1.0; 4];
    assert_eq!(scaled_dot_similarity(&ones, &ones).unwrap(), 2.0);
    assert_eq!(
        scaled_dot_similarity(&[0.0; 4], &[3.0, 1.0, 2.0, 5.0]).unwrap(),
        0.0
    );
    let z = [0.3, -1.0, 2.0];
    let p = [1.5, 0.5, -0.25];
    let base = scaled_dot_similarity(&z, &p).unwrap();
    let scaled: Vec<f64> = z.iter().map(|x| 3.5 * x).collect();
    assert!(close(
        scaled_dot_similarity(&scaled, &p).unwrap(),
        3.5 * base,
        1e-14
    ));
}

// ---------------------------------------------------------------- gaussian

#[test]
fn gaussian_log_density_values() {
    let one = GaussianProto {
        mean: vec![0.0],
        log_var: vec![0.0],
    };
    assert!(close(
        gaussian_log_similarity(&[0.0], &one).unwrap(),
        -0.918_938_533_204_672_7,
        1e-14
    ));
    let two = GaussianProto {
        mean: vec![0.4, -0.1],
        log_var: vec![0.0, 0.0],
    };
    assert!(close(
        gaussian_log_similarity(&[0.4, -0.1], &two).unwrap(),
        -1.837_877_066_409_345_5,
        1e-14
    ));
}

#[test]
fn gaussian_one_sigma_step_costs_half() {
    let p = GaussianProto {
        mean: vec![0.2, 0.7, -0.3],
        log_var: vec![(0.25f64).ln(), 0.3, -1.2],
    };
    let peak = gaussian_log_similarity(&p.mean, &p).unwrap();
    let mut z = p.mean.clone();
    z[0] += 0.5; // one standard deviation
    let off = gaussian_log_similarity(&z, &p).unwrap();
    assert!(close(peak - off, 0.5, 1e-14));
}

// ---------------------------------------------------------------- hyperpg

#[test]
fn hyperpg_peak_is_density_at_one() {
    let anchor = vec![0.0, 0.0, 1.0];
    let h = HyperPg::new(anchor.clone(), 1.0, 0.1, PdfFamily::TruncGaussian).unwrap();
    let v = hyperpg_similarity(&anchor, &h).unwrap();
    let want = pdf_eval(PdfFamily::TruncGaussian, 1.0, 1.0, h.sigma()).unwrap();
    assert!(close(v, want, 1e-12));
    assert!(close(h.sigma(), 0.1, 1e-12));
}

#[test]
fn hyperpg_ring_argmax_is_orthogonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let anchor = vec![0.0, 0.0, 1.0];
    let h = HyperPg::new(anchor.clone(), 0.0, 0.1, PdfFamily::TruncGaussian).unwrap();
    let best = (0..20_000)
        .map(|_| random_unit(&mut rng, 3))
        .map(|z| (hyperpg_similarity(&z, &h).unwrap(), z))
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap();
    assert!(cosine_similarity(&best.1, &anchor).unwrap().abs() < 0.05);
}

#[test]
fn hyperpg_cap_decreases_with_angle() {
    let anchor = vec![0.0, 0.0, 1.0];
    let h = HyperPg::new(anchor, 1.0, 0.1, PdfFamily::TruncGaussian).unwrap();
    let mut prev = f64::INFINITY;
    for i in 0..=180 {
        let theta = (i as f64).to_radians();
        let v = hyperpg_similarity(&[theta.sin(), 0.0, theta.cos()], &h).unwrap();
        assert!(v < prev, "not decreasing at {i} degrees");
        prev = v;
    }
}

#[test]
fn hyperpg_equal_cosine_equal_score() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = HyperPg::new(vec![0.0, 0.0, 1.0], 0.3, 0.2, PdfFamily::TruncCauchy).unwrap();
    let base = hyperpg_similarity(&[0.6, 0.0, 0.8], &h).unwrap();
    for _ in 0..50 {
        let phi: f64 = rng.random_range(0.0..2.0 * PI);
        let z = [0.6 * phi.cos(), 0.6 * phi.sin(), 0.8];
        assert!(close(hyperpg_similarity(&z, &h).unwrap(), base, 1e-12));
    }
}

// ---------------------------------------------------------------- vmf

#[test]
fn vmf_examples() {
    let p = VmfProto {
        anchor: vec![1.0, 2.0, 2.0],
        log_kappa: 3.0f64.ln(),
    };
    assert!(close(
        vmf_log_similarity(&[1.0, 2.0, 2.0], &p).unwrap(),
        3.0,
        1e-14
    ));
    assert!(close(
        vmf_log_similarity(&[2.0, -1.0, 0.0], &p).unwrap(),
        0.0,
        1e-15
    ));
}

#[test]
fn vmf_matches_unnormalized_gaussian_up_to_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let kappa: f64 = 2.5;
    let anchor = random_unit(&mut rng, 6);
    let p = VmfProto {
        anchor: anchor.clone(),
        log_kappa: kappa.ln(),
    };
    for _ in 0..100 {
        let v = random_unit(&mut rng, 6);
        let lhs = vmf_log_similarity(&v, &p).unwrap().exp();
        let cos = dot(&v, &anchor);
        let ratio = lhs / (kappa * (cos - 1.0)).exp();
        assert!((ratio / kappa.exp() - 1.0).abs() < 1e-12);
    }
}

// ---------------------------------------------------------------- fisher-bingham

fn worked_fb() -> FisherBingham {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    FisherBingham::new(
        3,
        vec![0.0, 0.0, 1.0, s, s, 0.0, -s, s, 0.0],
        2.0,
        vec![0.7, 0.3],
    )
    .unwrap()
}

#[test]
fn fb_worked_example() {
    // kappa * 0.8 + 0.7 * 0.18 + 0.3 * 0.18
    let fb = worked_fb();
    let v = fb_log_similarity(&[3.0, 0.0, 4.0], &fb).unwrap();
    assert!(close(v, 1.78, 1e-14));
}

#[test]
fn fb_at_mean_axis_is_kappa() {
    let fb = worked_fb();
    assert!(close(
        fb_log_similarity(&[0.0, 0.0, 2.0], &fb).unwrap(),
        2.0,
        1e-14
    ));
}

#[test]
fn fb_quadratic_term_bounded_by_max_beta() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = 5;
    let mut fb = FisherBingham {
        dim: d,
        axes: (0..d * d).map(|_| rng.sample(StandardNormal)).collect(),
        log_kappa: 3.0f64.ln(),
        beta: vec![0.25; 4],
    };
    fb.project();
    fb.validate().unwrap();
    for _ in 0..50 {
        let mut v = random_unit(&mut rng, d);
        let c = dot(&v, fb.axis(0));
        for (x, a) in v.iter_mut().zip(fb.axis(0)) {
            *x -= c * a;
        }
        let s = fb_log_similarity(&v, &fb).unwrap();
        assert!((-1e-12..=0.25 + 1e-12).contains(&s));
    }
}

#[test]
fn fb_constraint_violations_are_rejected() {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let axes = vec![0.0, 0.0, 1.0, s, s, 0.0, -s, s, 0.0];
    // betas do not sum to one
    assert!(FisherBingham::new(3, axes.clone(), 2.0, vec![0.5, 0.3]).is_err());
    // 2|beta| >= kappa
    assert!(FisherBingham::new(3, axes.clone(), 1.0, vec![0.6, 0.4]).is_err());
    // skewed frame
    let mut bad = axes.clone();
    bad[3] = 0.9;
    assert!(FisherBingham::new(3, bad.clone(), 2.0, vec![0.5, 0.5]).is_err());
    let fb = FisherBingham {
        dim: 3,
        axes: bad,
        log_kappa: 2.0f64.ln(),
        beta: vec![0.5, 0.5],
    };
    assert!(matches!(
        fb_log_similarity(&[1.0, 0.0, 0.0], &fb),
        Err(crate::Error::InvalidPrototype(_))
    ));
}

#[test]
fn fb_projection_restores_constraints() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for d in [2, 3, 7] {
        let mut fb = FisherBingham {
            dim: d,
            axes: (0..d * d).map(|_| rng.sample(StandardNormal)).collect(),
            log_kappa: rng.random_range(-3.0..2.0),
            beta: (0..d - 1).map(|_| rng.random_range(-5.0..5.0)).collect(),
        };
        fb.project();
        fb.validate().unwrap();
    }
}

#[test]
fn truncated_hyperpg_projection_keeps_mass() {
    for family in PdfFamily::ALL {
        let mut h = HyperPg::new(vec![0.0, 1.0], 50.0, 0.01, family).unwrap();
        h.project();
        if family.is_truncated() {
            assert!((h.mu - (1.0 + MAX_TRUNC_OFFSET * h.sigma())).abs() < 1e-12);
            assert!(hyperpg_similarity(&[0.0, 1.0], &h).unwrap().is_finite());
        } else {
            assert_eq!(h.mu, 50.0);
        }
    }
    let mut inside = HyperPg::new(vec![1.0, 0.0], -0.3, 0.2, PdfFamily::TruncGaussian).unwrap();
    let before = inside.clone();
    inside.project();
    assert_eq!(inside, before);
}

// ---------------------------------------------------------------- mixture

fn comp(mu: f64, sigma: f64) -> HyperPg {
    HyperPg::new(vec![0.2, -0.4, 1.0], mu, sigma, PdfFamily::TruncGaussian).unwrap()
}

#[test]
fn mixture_examples() {
    let z = [0.5, 0.1, 0.3];
    let a = comp(0.7, 0.2);
    let b = HyperPg {
        anchor: vec![1.0, 0.0, 0.0],
        ..comp(0.1, 0.4)
    };
    let single = MixtureHyperPg::new(vec![a.clone()], vec![0.3]).unwrap();
    assert!(close(
        mixture_similarity(&z, &single).unwrap(),
        hyperpg_similarity(&z, &a).unwrap(),
        1e-14
    ));

    let twins = MixtureHyperPg::new(vec![a.clone(), a.clone()], vec![-2.0, 1.5]).unwrap();
    assert!(close(
        mixture_similarity(&z, &twins).unwrap(),
        hyperpg_similarity(&z, &a).unwrap(),
        1e-14
    ));

    let half = MixtureHyperPg::new(vec![a.clone(), b.clone()], vec![0.0, 0.0]).unwrap();
    let (va, vb) = (
        hyperpg_similarity(&z, &a).unwrap(),
        hyperpg_similarity(&z, &b).unwrap(),
    );
    assert!(close(
        mixture_similarity(&z, &half).unwrap(),
        0.5 * (va + vb),
        1e-14
    ));
}

#[test]
fn mixture_is_permutation_invariant() {
    let z = [0.5, 0.1, 0.3];
    let comps = vec![comp(0.7, 0.2), comp(-0.2, 0.5), comp(0.1, 0.05)];
    let logits = vec![0.3, -1.0, 2.0];
    let m = MixtureHyperPg::new(comps.clone(), logits.clone()).unwrap();
    let perm = [2, 0, 1];
    let m2 = MixtureHyperPg::new(
        perm.iter().map(|&i| comps[i].clone()).collect(),
        perm.iter().map(|&i| logits[i]).collect(),
    )
    .unwrap();
    assert!(close(
        mixture_similarity(&z, &m).unwrap(),
        mixture_similarity(&z, &m2).unwrap(),
        1e-14
    ));
}

// ---------------------------------------------------------------- gradients

#[test]
fn cosine_gradient_is_orthogonal_to_input() {
    let p = Prototype::Cosine(vec![0.3, -0.8, 0.5]);
    let g = similarity_gradient(&p, &[0.3, -0.8, 0.5]).unwrap();
    assert!(dot(&g.grad_z, &[0.3, -0.8, 0.5]).abs() < 1e-14);
    let g = similarity_gradient(&p, &[1.0, 2.0, 0.1]).unwrap();
    assert!(dot(&g.grad_z, &[1.0, 2.0, 0.1]).abs() < 1e-14);
}

#[test]
fn l2_gradient_vanishes_at_peak() {
    let p = Prototype::Euclidean {
        point: vec![0.1, 0.9],
        eps: 1e-4,
    };
    let g = similarity_gradient(&p, &[0.1, 0.9]).unwrap();
    assert!(g.grad_z.iter().chain(&g.grad_params).all(|x| *x == 0.0));
}

#[test]
fn every_formulation_matches_finite_differences() {
    for f in Formulation::ALL {
        let err = check_similarity(f, 100, 1234).unwrap();
        assert!(err < GRAD_TOLERANCE, "{f}: max relative error {err:e}");
    }
}

#[test]
fn gradient_shapes_match_parameter_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for f in Formulation::ALL {
        let p = random_prototype(f, 4, &mut rng);
        let g = p.gradient(&[0.1, 0.5, -0.3, 0.9]).unwrap();
        assert_eq!(g.grad_z.len(), 4);
        assert_eq!(g.grad_params.len(), p.num_params(), "{f}");
        assert_eq!(p.decay_mask().len(), p.num_params(), "{f}");
        assert!(Formulation::of(&p) == f && f.matches(&p));
    }
}

// ---------------------------------------------------------------- invariants

#[test]
fn truncated_densities_integrate_to_one() {
    let nodes = gauss_legendre(512);
    for family in [PdfFamily::TruncGaussian, PdfFamily::TruncCauchy] {
        for loc in [-1.0, 0.0, 0.5, 1.0] {
            for scale in [0.05, 0.2, 1.0] {
                let total: f64 = nodes
                    .iter()
                    .map(|(x, w)| w * pdf_eval(family, *x, loc, scale).unwrap())
                    .sum();
                assert!(
                    (total - 1.0).abs() < 1e-6,
                    "{family} loc={loc} scale={scale}: {total}"
                );
            }
        }
    }
}

#[test]
fn vmf_gaussian_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for kappa in [0.5, 5.0, 50.0] {
        for _ in 0..100 {
            let v = random_unit(&mut rng, 8);
            let a = random_unit(&mut rng, 8);
            let d2: f64 = v.iter().zip(&a).map(|(x, y)| (x - y) * (x - y)).sum();
            let lhs = (-kappa * d2 / 2.0).exp();
            let rhs = (-kappa).exp() * (kappa * dot(&v, &a)).exp();
            assert!(((lhs - rhs) / lhs).abs() < 1e-12);
        }
    }
}

#[test]
fn formulation_tags_round_trip() {
    for f in Formulation::ALL {
        assert_eq!(f.tag().parse::<Formulation>().unwrap(), f);
        assert_eq!(Formulation::from_code(f.code()), Some(f));
    }
    let err = "banana".parse::<Formulation>().unwrap_err().to_string();
    assert!(err.contains("hyperpg-trunc-cauchy"));
}

proptest! {
    #[test]
    fn directional_scores_ignore_positive_scaling(
        z in proptest::collection::vec(-2.0f64..2.0, 4),
        c in 0.01f64..100.0,
        seed in 0u64..1000,
    ) {
        prop_assume!(norm(&z) > 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scaled: Vec<f64> = z.iter().map(|x| c * x).collect();
        for f in Formulation::ALL.into_iter().filter(|f| f.is_hyperspherical()) {
            let p = random_prototype(f, 4, &mut rng);
            let a = p.similarity(&z).unwrap();
            let b = p.similarity(&scaled).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{} {} {}", f, a, b);
        }
    }

    #[test]
    fn cosine_stays_in_range(
        z in proptest::collection::vec(-5.0f64..5.0, 1..8),
        seed in 0u64..1000,
    ) {
        prop_assume!(norm(&z) > 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = (0..z.len()).map(|_| rng.sample(StandardNormal)).collect();
        let c = cosine_similarity(&z, &p).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
    }

    #[test]
    fn l2_is_decreasing_in_distance(r1 in 0.0f64..50.0, dr in 1e-6f64..50.0) {
        let a = l2_similarity(&[r1], &[0.0], 1e-4).unwrap();
        let b = l2_similarity(&[r1 + dr], &[0.0], 1e-4).unwrap();
        prop_assert!(b < a);
    }

    #[test]
    fn cdf_is_monotone(x in -10.0f64..10.0, dx in 0.0f64..5.0, mu in -2.0f64..2.0, s in 0.01f64..3.0) {
        let a = gaussian_cdf(x, mu, s).unwrap();
        let b = gaussian_cdf(x + dx, mu, s).unwrap();
        prop_assert!(b >= a && (0.0..=1.0).contains(&a));
    }
}
