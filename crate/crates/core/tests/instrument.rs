use anlab::arch::{Model, ModelConfig, Variant};
use anlab::data::{byte_tokenize, sample_batches, synthetic_corpus, Batch};
use anlab::instrument::*;
use anlab::optim::{train_step, OptimConfig, OptimState};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn batches(n: usize, b: usize, s: usize) -> Vec<Batch> {
    let stream = byte_tokenize(&synthetic_corpus(50_000, 3));
    sample_batches(&stream, b, s, 11).unwrap().take(n).collect()
}

#[test]
fn power_law_fit_recovers_noisy_exponent() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let pts: Vec<(f64, f64)> = (0..40)
        .map(|i| {
            let x = 10f64.powf(1.0 + i as f64 * 0.1);
            (x, 3.0 * x.powf(-0.076) * (noise.sample(&mut rng) as f64).exp())
        })
        .collect();
    let f = power_law_fit(&pts).unwrap();
    assert!((f.exponent + 0.076).abs() < 0.02, "{}", f.exponent);
    assert!(f.residual > 0.0);
    let same: Vec<_> = [(2.0, 1.0), (2.0, 3.0)].to_vec();
    assert!(power_law_fit(&same).is_err());
}

#[test]
fn metric_sink_writes_and_reads_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.jsonl");
    {
        let mut s = MetricSink::to_file(&p, 3).unwrap();
        for i in 0..10u64 {
            s.push(MetricRecord::new(i, "a", i as f64 * 0.5)).unwrap();
            s.push(MetricRecord::new(i, "b", -(i as f64))).unwrap();
        }
        assert!(s.push(MetricRecord::new(3, "a", 1.0)).is_err());
        assert!(s.push(MetricRecord::new(20, "a", f64::NAN)).is_err());
        assert_eq!(s.series("b").len(), 10);
    }
    let back = read_metrics(&p).unwrap();
    assert_eq!(back.len(), 20);
    assert_eq!(series_of(&back, "a")[4], (4, 2.0));
    std::fs::write(&p, "{\"step\":1}\n").unwrap();
    assert!(read_metrics(&p).is_err());
}

#[test]
fn norm_ratio_rows_cover_every_block() {
    for v in [Variant::GptPlus, Variant::Ngpt, Variant::Angpt] {
        let m = Model::<f64>::build(&ModelConfig::new(v, 32, 3, 2, 256, 16), 1).unwrap();
        let rows = norm_ratio_report(&m, &batches(2, 2, 16)).unwrap();
        assert_eq!(rows.len(), 6);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.layer, i / 2);
            assert_eq!(r.block, if i % 2 == 0 { "attention" } else { "mlp" });
            assert!(r.ratio.is_finite() && r.ratio > 0.0);
            if v == Variant::Ngpt {
                assert!((r.ratio - 1.0).abs() < 1e-9);
            }
        }
        assert!(norm_ratio_report(&m, &[]).is_err());
    }
}

#[test]
fn robustness_is_trivial_for_the_exact_sphere() {
    let m = Model::<f64>::build(&ModelConfig::new(Variant::Ngpt, 32, 2, 1, 256, 64), 2).unwrap();
    let text = &batches(1, 2, 64)[0];
    let rep = robustness_probe(&m, text, &repeated_token_batch(65, 2, 64)).unwrap();
    assert!((rep.ratio - 1.0).abs() < 1e-9);
    assert_eq!(rep.rows[0].kind, "text");
    assert!(rep.rows.iter().all(|r| r.std < 1e-9));
    assert!(robustness_probe(&m, text, &repeated_token_batch(65, 1, 64)).is_err());
}

#[test]
fn relative_momentum_variance_sums_to_one() {
    let cfg = ModelConfig::new(Variant::Angpt, 16, 1, 1, 256, 16);
    let mut m = Model::<f64>::build(&cfg, 4).unwrap();
    let mut st = OptimState::new(&m, &OptimConfig::new(0.01, 8)).unwrap();
    let mut tr = MomentTrace::default();
    for b in batches(8, 2, 16) {
        train_step(&mut m, &b, &mut st, false).unwrap();
        tr.record(&m, &st);
    }
    let mats = m.params().iter().filter(|p| p.spec.role.is_matrix()).count();
    assert_eq!(tr.groups.len(), mats);
    for (name, s) in momentum_rel_variance(&tr).unwrap() {
        assert_eq!(s.len(), 8);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{name}");
    }
    let zero = MomentTrace {
        groups: vec![("w".into(), vec![0.0, 0.0])],
    };
    assert!(momentum_rel_variance(&zero).is_err());
}

#[test]
fn traces_match_the_variant() {
    let a = Model::<f64>::build(&ModelConfig::new(Variant::Angpt, 32, 2, 1, 256, 16), 1).unwrap();
    let alphas = trace_alphas(&a, 0).unwrap();
    assert_eq!(alphas.len(), 4);
    assert!(max_row_norm(&a) <= 1.0 + 1e-12);
    assert!(!trace_row_norms(&a, 0).is_empty());
    let g = Model::<f64>::build(&ModelConfig::new(Variant::GptPlus, 32, 2, 1, 256, 16), 1).unwrap();
    assert!(trace_alphas(&g, 0).is_err());
    for r in trace_gamma_norms(&g, 0) {
        assert!((r.value - 32f64.sqrt()).abs() < 1e-12, "{}", r.series);
    }
    let b = &batches(1, 1, 16)[0];
    let t = a.trace(&b.inputs, 1, 16).unwrap();
    let recs = trace_block_norms(&t, 7);
    assert_eq!(recs.len(), 2);
    assert!(recs.iter().all(|r| r.step == 7));
}

#[test]
fn chart_is_well_formed_svg() {
    let s = line_chart("t", "x", "y", &[("a".into(), vec![(0.0, 1.0), (1.0, 2.0)]), ("b".into(), vec![])]);
    assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
    assert!(s.contains("<polyline"));
}

proptest! {
    #[test]
    fn exact_power_laws_are_recovered(a in 0.01f64..100.0, b in -3.0f64..3.0, n in 2usize..30) {
        let pts: Vec<(f64, f64)> = (1..=n).map(|i| (i as f64 * 1.7, a * (i as f64 * 1.7).powf(b))).collect();
        let f = power_law_fit(&pts).unwrap();
        prop_assert!((f.exponent - b).abs() < 1e-10);
        prop_assert!((f.coefficient - a).abs() / a < 1e-10);
    }
}
