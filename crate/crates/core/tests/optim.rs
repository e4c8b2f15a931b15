use anlab::arch::{Constraint, Model, ModelConfig, Variant};
use anlab::data::{byte_tokenize, sample_batches, synthetic_corpus};
use anlab::ndmath::Tensor;
use anlab::optim::*;
use proptest::prelude::*;

fn tiny(v: Variant) -> Model<f64> {
    Model::build(&ModelConfig::new(v, 16, 1, 2, 256, 8), 3).unwrap()
}

fn ramp_grads(m: &Model<f64>) -> Vec<Tensor<f64>> {
    m.params()
        .iter()
        .map(|p| {
            let n = p.value.len();
            let g: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 3.0) * 0.01 + 0.003).collect();
            Tensor::from_f64(p.value.shape().to_vec(), &g).unwrap()
        })
        .collect()
}

#[test]
fn first_adam_step_matches_closed_form() {
    let mut model = tiny(Variant::GptPlus);
    let mut cfg = OptimConfig::new(1e-2, 10);
    cfg.weight_decay = Some(0.0);
    let mut st = OptimState::new(&model, &cfg).unwrap();
    let before = model.clone();
    let grads = ramp_grads(&model);
    st.step(&mut model, &grads, 1e-2).unwrap();
    for ((p, q), g) in model.params().iter().zip(before.params()).zip(&grads) {
        for ((a, b), gj) in p.value.data().iter().zip(q.value.data()).zip(g.data()) {
            let want = b - 1e-2 * gj / (gj.abs() + 1e-9);
            assert!((a - want).abs() < 1e-14, "{}", p.spec.name);
        }
    }
}

#[test]
fn adamw_decays_matrices_only() {
    let mut model = tiny(Variant::GptPlus);
    let cfg = OptimConfig::new(1e-2, 10);
    let mut st = OptimState::new(&model, &cfg).unwrap();
    assert_eq!(st.config.weight_decay, Some(0.1));
    let before = model.clone();
    let zeros: Vec<Tensor<f64>> = model.params().iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
    st.step(&mut model, &zeros, 1e-2).unwrap();
    for (p, q) in model.params().iter().zip(before.params()) {
        let f = if p.spec.role.is_matrix() { 1.0 - 1e-3 } else { 1.0 };
        for (a, b) in p.value.data().iter().zip(q.value.data()) {
            assert!((a - b * f).abs() < 1e-15);
        }
    }
}

#[test]
fn second_step_uses_bias_corrected_moments() {
    let mut model = tiny(Variant::GptPlus);
    let mut cfg = OptimConfig::new(1e-3, 10);
    cfg.weight_decay = Some(0.0);
    cfg.beta2 = Some(0.95);
    let mut st = OptimState::new(&model, &cfg).unwrap();
    let (g1, g2) = (0.5, -0.2);
    let th0 = model.params()[0].value.data()[0];
    for g in [g1, g2] {
        let grads: Vec<Tensor<f64>> = model
            .params()
            .iter()
            .map(|p| Tensor::from_f64(p.value.shape().to_vec(), &vec![g; p.value.len()]).unwrap())
            .collect();
        st.step(&mut model, &grads, 1e-3).unwrap();
    }
    let m = (0.9 * 0.1 * g1 + 0.1 * g2) / (1.0 - 0.81);
    let v = (0.95 * 0.05 * g1 * g1 + 0.05 * g2 * g2) / (1.0 - 0.95f64 * 0.95);
    let th1 = th0 - 1e-3 * g1 / (g1.abs() + 1e-9);
    let want = th1 - 1e-3 * m / (v.sqrt() + 1e-9);
    assert!((model.params()[0].value.data()[0] - want).abs() < 1e-15);
    assert_eq!(st.step, 2);
}

#[test]
fn constrained_variants_keep_rows_after_steps() {
    for v in [Variant::Ngpt, Variant::Angpt] {
        let mut model = tiny(v);
        let cfg = OptimConfig::new(0.5, 10);
        let mut st = OptimState::new(&model, &cfg).unwrap();
        let grads = ramp_grads(&model);
        st.step(&mut model, &grads, 0.5).unwrap();
        for p in model.params() {
            let Some(c) = p.spec.role.constraint() else { continue };
            for n in anlab::arch::constraint_norms(&p.value, c) {
                match v {
                    Variant::Ngpt => assert!((n - 1.0).abs() < 1e-12, "{}", p.spec.name),
                    _ => assert!(n <= 1.0 + 1e-12, "{}", p.spec.name),
                }
            }
        }
    }
}

#[test]
fn step_rejects_mismatched_gradients() {
    let mut model = tiny(Variant::Angpt);
    let mut st = OptimState::new(&model, &OptimConfig::new(1e-3, 10)).unwrap();
    assert!(st.step(&mut model, &[], 1e-3).is_err());
}

#[test]
fn warmup_and_decay_live_in_the_optim_config() {
    let ok: OptimConfig = serde_json::from_str(r#"{"lr": 0.001, "total_steps": 100, "warmup_fraction": 0.5}"#).unwrap();
    assert_eq!(ok.warmup_fraction, Some(0.5));
    assert_eq!(lr_at(&ok.schedule(), 25).unwrap(), 5e-4);
    let bad = serde_json::from_str::<OptimConfig>(r#"{"lr": 0.001, "total_steps": 100, "warmup": 0.5}"#);
    assert!(bad.is_err());
    let mut c = OptimConfig::new(1e-3, 10);
    c.weight_decay = Some(0.1);
    c.constraint = Some(ConstraintMode::BoundRows);
    assert!(c.validate().is_err());
    c.warmup_fraction = Some(1.0);
    c.constraint = None;
    assert!(c.validate().is_err());
}

#[test]
fn training_lowers_the_loss() {
    let cfg = ModelConfig::new(Variant::Angpt, 32, 2, 1, 256, 64);
    let mut model = Model::<f32>::build(&cfg, 1).unwrap();
    let stream = byte_tokenize(&synthetic_corpus(100_000, 2));
    let mut st = OptimState::new(&model, &OptimConfig::new(0.05, 60)).unwrap();
    let mut losses = Vec::new();
    for b in sample_batches(&stream, 8, 32, 7).unwrap().take(60) {
        let r = train_step(&mut model, &b, &mut st, false).unwrap();
        assert!(r.clip_scale <= 1.0 && r.grad_norm.is_finite());
        losses.push(r.loss);
    }
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[50..].iter().sum::<f64>() / 10.0;
    assert!(tail < head - 0.2, "{head} -> {tail}");
}

#[test]
fn smoke_training_beats_the_uniform_baseline() {
    let cfg = ModelConfig::new(Variant::Angpt, 64, 2, 1, 256, 64);
    let mut model = Model::<f32>::build(&cfg, 3).unwrap();
    let stream = byte_tokenize(&synthetic_corpus(100_000, 4));
    let mut st = OptimState::new(&model, &OptimConfig::new(0.02, 200)).unwrap();
    let mut last = Vec::new();
    for b in sample_batches(&stream, 8, 32, 5).unwrap().take(200) {
        last.push(train_step(&mut model, &b, &mut st, false).unwrap().loss);
    }
    let tail: f64 = last[190..].iter().sum::<f64>() / 10.0;
    assert!(tail < 256f64.ln(), "{tail}");
}

proptest! {
    #[test]
    fn lr_is_bounded_and_continuous(
        base in 1e-5f64..1.0,
        total in 10u64..5000,
        warm in 0.0f64..0.5,
        decay in 0.0f64..0.5,
    ) {
        let s = Schedule { base_lr: base, total_steps: total, warmup_fraction: warm, decay_factor: decay };
        let mut prev = lr_at(&s, 0).unwrap();
        let wsteps = (warm * total as f64).max(1.0);
        let jump = base * (1.0 / wsteps).max(std::f64::consts::PI / (total as f64 * (1.0 - warm)));
        for t in 0..=total {
            let lr = lr_at(&s, t).unwrap();
            prop_assert!(lr >= 0.0 && lr <= base * (1.0 + 1e-12));
            prop_assert!((lr - prev).abs() <= jump * 1.0001 + 1e-15);
            if (t as f64) >= warm * total as f64 {
                prop_assert!(lr >= decay * base * (1.0 - 1e-12));
            }
            prev = lr;
        }
        prop_assert!((lr_at(&s, total).unwrap() - decay * base).abs() <= 1e-12 * base);
    }

    #[test]
    fn clipping_bounds_the_global_norm(vals in prop::collection::vec(-100.0f64..100.0, 1..64), max in 0.01f64..10.0) {
        let mut g = vec![Tensor::<f64>::from_f64(vec![vals.len()], &vals).unwrap()];
        let before = global_norm(&g);
        let s = clip_gradients(&mut g, max);
        let after = global_norm(&g);
        prop_assert!(after <= max * (1.0 + 1e-12));
        prop_assert!(s <= 1.0);
        if before <= max {
            prop_assert_eq!(s, 1.0);
        }
    }

    #[test]
    fn constraints_are_idempotent(
        vals in prop::collection::vec(-3.0f64..3.0, 12),
        cols in prop_oneof![Just(Constraint::Rows), Just(Constraint::Columns)],
        normalize in any::<bool>(),
    ) {
        prop_assume!(vals.iter().any(|v| v.abs() > 1e-3));
        let mode = if normalize { ConstraintMode::NormalizeRows } else { ConstraintMode::BoundRows };
        let mut t = Tensor::<f64>::from_f64(vec![3, 4], &vals).unwrap();
        if apply_constraint(&mut t, cols, mode).is_err() {
            return Ok(());
        }
        let once = t.clone();
        apply_constraint(&mut t, cols, mode).unwrap();
        for (a, b) in t.data().iter().zip(once.data()) {
            prop_assert!((a - b).abs() < 1e-14);
        }
        for n in anlab::arch::constraint_norms(&t, cols) {
            prop_assert!(n <= 1.0 + 1e-12);
            if normalize {
                prop_assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn fixed_batch_loss_mostly_decreases_under_bound_rows() {
    let cfg = ModelConfig::smoke(Variant::Angpt);
    let mut model = Model::<f32>::build(&cfg, 1).unwrap();
    let stream = byte_tokenize(&synthetic_corpus(20_000, 6));
    let batch = sample_batches(&stream, 4, 32, 2).unwrap().next().unwrap();
    let oc = OptimConfig::new(0.02, 50);
    let mut st = OptimState::new(&model, &oc).unwrap();
    assert_eq!(st.constraint_mode(), ConstraintMode::BoundRows);
    let mut losses = Vec::new();
    for _ in 0..50 {
        losses.push(train_step(&mut model, &batch, &mut st, false).unwrap().loss);
    }
    losses.push(eval_loss(&model, &batch).unwrap());
    let down = losses.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(down >= 45, "{down} of 50");
}
