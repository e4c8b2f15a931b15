use anlab::arch::{ModelConfig, NuPMode, Variant};
use anlab::normfactor::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn unit(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn identity_activation_factor_is_sqrt_d() {
    for d in [64, 256] {
        let est = activation_factor_mc(Activation::Identity, d, 100_000, 5).unwrap();
        let sq = (d as f64).sqrt();
        assert!((est - sq).abs() / sq < 0.02, "d={d}: {est}");
    }
    assert!(activation_factor_mc(Activation::Silu, 8, 0, 0).is_err());
}

#[test]
fn classic_factor_agrees_with_midpoint_lerp() {
    // ν(0.5)·‖(h + x)/2‖ and ‖h + x‖/√2 have the same expectation.
    let (d, n) = (4096, 100_000);
    let mut s = SphereSampler::new(17);
    let (mut h, mut x) = (vec![0.0; d], vec![0.0; d]);
    let (mut lerp, mut classic) = (0.0, 0.0);
    for _ in 0..n {
        s.fill(&mut h);
        s.fill(&mut x);
        let sum: Vec<f64> = h.iter().zip(&x).map(|(a, b)| a + b).collect();
        let ns = norm(&sum);
        lerp += lerp_factor(0.5) * 0.5 * ns;
        classic += classic_residual_factor() * ns;
    }
    assert!((lerp - classic).abs() / classic < 0.02);
    assert!((classic / n as f64 - 1.0).abs() < 0.02);
}

#[test]
fn sphere_sampler_is_deterministic_and_unit() {
    let a = SphereSampler::new(3).point(100);
    let b = SphereSampler::new(3).point(100);
    assert_eq!(a, b);
    assert!((norm(&a) - 1.0).abs() < 1e-12);
    let w = SphereSampler::new(4).row_normalized(5, 7);
    for r in w.chunks(7) {
        assert!((norm(r) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn input_norm_has_zero_spread() {
    let rep = concentration_check(ConcentrationMap::InputNorm, &[8, 64, 512], 1000, 1).unwrap();
    for r in &rep.rows {
        assert_eq!(r.std_norm, 0.0);
        assert_eq!(r.mean_norm, 1.0);
        assert_eq!(r.sample_count, 1000);
    }
}

#[test]
fn linear_map_norms_concentrate_around_the_analytic_mean() {
    let dims = [64, 128, 256, 512, 1024];
    for ratio in [0.25, 1.0] {
        let rep = concentration_check(ConcentrationMap::LinearMap { out_ratio: ratio }, &dims, 5000, 9).unwrap();
        let mut inversions = 0;
        for (i, r) in rep.rows.iter().enumerate() {
            if r.d >= 256 {
                let want = ratio.sqrt();
                assert!((r.mean_norm - want).abs() / want < 0.02, "{ratio} d={}: {}", r.d, r.mean_norm);
            }
            if i > 0 && r.std_norm >= rep.rows[i - 1].std_norm {
                inversions += 1;
            }
        }
        assert!(inversions <= 1);
        let slope = rep.log_log_slope().unwrap();
        assert!((slope + 0.5).abs() < 0.1, "slope {slope}");
    }
}

#[test]
fn concentration_rejects_bad_arguments() {
    let m = ConcentrationMap::LinearMap { out_ratio: 1.0 };
    assert!(concentration_check(m, &[], 1000, 0).is_err());
    assert!(concentration_check(m, &[64], 999, 0).is_err());
    assert!(concentration_check(m, &[0], 1000, 0).is_err());
    let a = concentration_check(ConcentrationMap::SiluGate, &[32, 64], 1000, 2).unwrap();
    let b = concentration_check(ConcentrationMap::SiluGate, &[32, 64], 1000, 2).unwrap();
    assert_eq!(a, b);
}

#[test]
fn estimation_errors_at_512() {
    let cfg = ModelConfig::new(Variant::Angpt, 512, 1, 8, 2, 1);
    let rows = estimation_error_report(&resolve_factors(&cfg), 512, 20_000, 3).unwrap();
    for r in &rows {
        if r.gated {
            assert!(r.rel_error < 0.02, "{}: {:.4}", r.name, r.rel_error);
        }
    }
    let lerp = rows.iter().find(|r| r.name.starts_with("nu_lerp")).unwrap();
    assert!(lerp.rel_error < 0.005);
    let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
    for n in ["nu_qkv", "nu_p", "nu_uz", "nu_acf", "nu_d", "nu_classic", "nu_identity_act"] {
        assert!(names.contains(&n), "{n}");
    }
}

#[test]
fn unity_output_projection_is_also_accurate() {
    let mut cfg = ModelConfig::new(Variant::Angpt, 512, 1, 8, 2, 1);
    cfg.factors.nu_p_mode = NuPMode::Unity;
    let f = resolve_factors(&cfg);
    assert_eq!(f.nu_p, 1.0);
    let rows = estimation_error_report(&f, 512, 5000, 4).unwrap();
    let p = rows.iter().find(|r| r.name == "nu_p").unwrap();
    assert!(p.rel_error < 0.02);
}

#[test]
fn residual_growth_follows_sqrt_l() {
    let rows = residual_growth_demo(64, 1024, 200, 1, 0.05).unwrap();
    assert_eq!(rows[0].additive, 1.0);
    let last = rows.last().unwrap();
    assert_eq!(last.l, 64);
    assert!((last.additive - 8.0).abs() / 8.0 < 0.1);
    assert!((last.lerp - 1.0).abs() < 0.05);
    assert!(residual_growth_demo(0, 4, 1, 0, 0.1).is_err());
}

#[test]
fn contraction_examples() {
    let r = contraction_demo(&[1.0, 1.0], 3).unwrap();
    assert_eq!((r.alpha_star, r.rho_max), (1.0, 0.0));
    assert_eq!(r.iterate_norms[1], 0.0);
    let r = contraction_demo(&[1.0, 9.0], 10).unwrap();
    assert!((r.alpha_star - 0.2).abs() < 1e-12 && (r.rho_max - 0.8).abs() < 1e-12);
    for k in 1..=10 {
        let ratio = r.iterates[k][0] / r.iterates[k - 1][0];
        assert!((ratio - 0.8).abs() < 1e-9);
    }
    assert!(r.preconditioned_norms[1..].iter().all(|&n| n == 0.0));
    assert!(contraction_demo(&[1.0, -2.0], 1).is_err());
    assert!(contraction_demo(&[], 1).is_err());
}

#[test]
fn global_scale_all_also_scales_the_residual_factor() {
    let mut cfg = ModelConfig::new(Variant::Angpt, 1024, 1, 16, 2, 1);
    cfg.factors.global_scale_all = 2.0;
    let f = resolve_factors(&cfg);
    assert_eq!((f.nu_qkv, f.nu_uz, f.nu_d), (8.0, 1.0, 4.0));
    assert!((f.residual_scale(0.5) - 2.0 * 2f64.sqrt()).abs() < 1e-12);
    cfg.factors.global_scale_all = 1.0;
    cfg.factors.residual_factor = false;
    assert_eq!(resolve_factors(&cfg).residual_scale(0.3), 1.0);
    cfg.factors.residual_factor = true;
    cfg.use_lerp = false;
    assert_eq!(resolve_factors(&cfg).residual_scale(0.3), classic_residual_factor());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn lerp_factor_range_and_symmetry(a in -1e3f64..1e3) {
        let v = lerp_factor(a);
        prop_assert!(v > 0.0 && v <= 2f64.sqrt() + 1e-15);
        prop_assert!((v - lerp_factor(1.0 - a)).abs() <= 1e-12 * v);
    }

    #[test]
    fn linear_factor_reciprocity(a in 1usize..100_000, b in 1usize..100_000) {
        let p = linear_factor(a, b).unwrap() * linear_factor(b, a).unwrap();
        prop_assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_lerp_is_exactly_unit(d in 2usize..128, a in -3.0f64..3.0, seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = unit(d, &mut rng);
        let mut x = unit(d, &mut rng);
        let dot: f64 = h.iter().zip(&x).map(|(p, q)| p * q).sum();
        x.iter_mut().zip(&h).for_each(|(xi, hi)| *xi -= dot * hi);
        let n = norm(&x);
        x.iter_mut().for_each(|xi| *xi /= n);
        let nu = lerp_factor(a);
        let out: Vec<f64> = h.iter().zip(&x).map(|(hi, xi)| (hi + a * (xi - hi)) * nu).collect();
        prop_assert!((norm(&out) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn causal_factors_are_row_roots(s in 1usize..200) {
        let AttentionScale::Causal(v) = attention_factor(AttentionKind::Causal, s).unwrap() else {
            return Err(TestCaseError::fail("dense"));
        };
        prop_assert_eq!(v.len(), s);
        for (r, f) in v.iter().enumerate() {
            prop_assert!((f - ((r + 1) as f64).sqrt()).abs() < 1e-15);
        }
        prop_assert_eq!(attention_factor(AttentionKind::Dense, s).unwrap(), AttentionScale::Dense((s as f64).sqrt()));
    }
}
