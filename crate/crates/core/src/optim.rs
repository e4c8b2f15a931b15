//! Adam/AdamW, the cosine schedule, gradient clipping and the row-norm
//! constraints that stand in for weight decay on the normalized variants.

use serde::{Deserialize, Serialize};

use crate::arch::{normalize_axis, BlockTrace, Model, Variant};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::ndmath::{Real, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    None,
    /// Rows with norm above 1 are projected back onto the unit sphere.
    BoundRows,
    /// Every row is rescaled to norm exactly 1.
    NormalizeRows,
}

impl ConstraintMode {
    pub fn for_variant(v: Variant) -> Self {
        match v {
            Variant::GptPlus => ConstraintMode::None,
            Variant::Ngpt => ConstraintMode::NormalizeRows,
            Variant::Angpt => ConstraintMode::BoundRows,
        }
    }
}

/// Parameter count at which β₂ switches from 0.99 to 0.95.
pub const BETA2_SWITCH: usize = 100_000_000;

fn d_beta1() -> f64 {
    0.9
}
fn d_eps() -> f64 {
    1e-9
}
fn d_clip() -> f64 {
    1.0
}
fn d_decay() -> f64 {
    0.01
}

/// Optimizer and schedule settings. `None` fields take variant- or
/// size-dependent defaults in [`OptimConfig::materialized`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub total_steps: u64,
    #[serde(default)]
    pub warmup_fraction: Option<f64>,
    #[serde(default)]
    pub weight_decay: Option<f64>,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default)]
    pub beta2: Option<f64>,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_clip")]
    pub clip_norm: f64,
    #[serde(default = "d_decay")]
    pub decay_factor: f64,
    #[serde(default)]
    pub constraint: Option<ConstraintMode>,
}

impl OptimConfig {
    pub fn new(lr: f64, total_steps: u64) -> Self {
        OptimConfig {
            lr,
            total_steps,
            warmup_fraction: None,
            weight_decay: None,
            beta1: d_beta1(),
            beta2: None,
            eps: d_eps(),
            clip_norm: d_clip(),
            decay_factor: d_decay(),
            constraint: None,
        }
    }

    /// Fills variant defaults: GPT+ warms up for 10% of the steps and uses
    /// AdamW with 0.1 decay; nGPT/anGPT use neither. β₂ is 0.99 below
    /// [`BETA2_SWITCH`] parameters and 0.95 above.
    pub fn materialized(&self, variant: Variant, n_params: usize) -> Self {
        let gpt = variant == Variant::GptPlus;
        let mut c = self.clone();
        c.warmup_fraction.get_or_insert(if gpt { 0.1 } else { 0.0 });
        c.weight_decay.get_or_insert(if gpt { 0.1 } else { 0.0 });
        c.beta2
            .get_or_insert(if n_params < BETA2_SWITCH { 0.99 } else { 0.95 });
        c.constraint.get_or_insert(ConstraintMode::for_variant(variant));
        c
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            base_lr: self.lr,
            total_steps: self.total_steps,
            warmup_fraction: self.warmup_fraction.unwrap_or(0.0),
            decay_factor: self.decay_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.schedule();
        s.validate()?;
        let b2 = self.beta2.unwrap_or(0.99);
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if self.eps < 0.0 || self.clip_norm <= 0.0 || self.weight_decay.unwrap_or(0.0) < 0.0 {
            return Err(Error::Config("eps, clip_norm and weight_decay must be nonnegative".into()));
        }
        if self.weight_decay.unwrap_or(0.0) > 0.0
            && matches!(self.constraint, Some(ConstraintMode::BoundRows | ConstraintMode::NormalizeRows))
        {
            return Err(Error::Config("weight_decay > 0 requires constraint `none`".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_steps: u64,
    pub warmup_fraction: f64,
    pub decay_factor: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction {} outside [0, 1)",
                self.warmup_fraction
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("decay_factor {} outside (0, 1]", self.decay_factor)));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warm-up to `base_lr` over `warmup_fraction·total_steps` steps,
/// then cosine annealing down to `decay_factor·base_lr` at `total_steps`.
pub fn lr_at(s: &Schedule, step: u64) -> Result<f64> {
    if step > s.total_steps {
        return Err(Error::invalid(format!(
            "lr_at: step {step} beyond total_steps {}",
            s.total_steps
        )));
    }
    let t = step as f64;
    let total = s.total_steps as f64;
    let warm = s.warmup_fraction * total;
    if t < warm {
        return Ok(s.base_lr * t / warm);
    }
    let p = ((t - warm) / (total - warm)).clamp(0.0, 1.0);
    let floor = s.decay_factor * s.base_lr;
    Ok(floor + (s.base_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

pub fn global_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt()
}

/// Rescales all gradients jointly so their global L2 norm is at most
/// `max_norm`. Returns the applied scale.
pub fn clip_gradients<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let n = global_norm(grads);
    if n <= max_norm || n == 0.0 {
        return 1.0;
    }
    let scale = max_norm / n;
    let s = T::of(scale);
    for g in grads {
        g.data_mut().iter_mut().for_each(|v| *v = *v * s);
    }
    scale
}

/// Applies a row constraint to a `[rows, cols]` matrix along `axis`.
pub fn apply_constraint<T: Real>(
    value: &mut Tensor<T>,
    axis: crate::arch::Constraint,
    mode: ConstraintMode,
) -> Result<()> {
    if value.ndim() != 2 {
        return Err(Error::shape("apply_constraint", "expected a matrix"));
    }
    let (r, c) = (value.shape()[0], value.shape()[1]);
    match mode {
        ConstraintMode::None => Ok(()),
        ConstraintMode::BoundRows => {
            normalize_axis(value.data_mut(), r, c, axis, true);
            Ok(())
        }
        ConstraintMode::NormalizeRows => {
            if normalize_axis(value.data_mut(), r, c, axis, false) {
                Ok(())
            } else {
                Err(Error::degenerate("apply_constraint", "zero-norm row under normalize_rows"))
            }
        }
    }
}

/// Moments and step counter for every parameter of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub config: OptimConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> OptimState<T> {
    /// Fresh state with materialized defaults for `model`.
    pub fn new(model: &Model<T>, config: &OptimConfig) -> Result<Self> {
        let config = config.materialized(model.config().variant, model.param_count());
        config.validate()?;
        let zeros = |p: &crate::arch::Param<T>| Tensor::zeros(p.value.shape().to_vec());
        Ok(OptimState {
            step: 0,
            m: model.params().iter().map(zeros).collect(),
            v: model.params().iter().map(zeros).collect(),
            config,
        })
    }

    pub fn constraint_mode(&self) -> ConstraintMode {
        self.config.constraint.unwrap_or(ConstraintMode::None)
    }

    /// One bias-corrected Adam step with learning rate `lr`. With
    /// `weight_decay > 0` matrices first decay by `lr·wd·θ` (AdamW).
    /// Constraints are applied afterwards.
    pub fn step(&mut self, model: &mut Model<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::shape("adam_step", "gradient count differs from parameter count"));
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (c.beta1, c.beta2.unwrap_or(0.99));
        let t = self.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let wd = c.weight_decay.unwrap_or(0.0);
        let mode = self.constraint_mode();
        let (tb1, tb2) = (T::of(b1), T::of(b2));
        let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let (lr_t, eps) = (T::of(lr), T::of(c.eps));
        let (ibc1, ibc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
        let decay = T::of(1.0 - lr * wd);
        for (i, p) in model.params_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            if g.len() != p.value.len() {
                return Err(Error::shape("adam_step", format!("gradient of `{}`", p.spec.name)));
            }
            let is_matrix = p.spec.role.is_matrix();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((th, &gj), mj), vj) in p.value.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                if wd > 0.0 && is_matrix {
                    *th = *th * decay;
                }
                *mj = tb1 * *mj + ob1 * gj;
                *vj = tb2 * *vj + ob2 * gj * gj;
                let mh = *mj * ibc1;
                let vh = *vj * ibc2;
                *th = *th - lr_t * mh / (vh.sqrt() + eps);
            }
            if let Some(axis) = p.spec.role.constraint() {
                apply_constraint(&mut p.value, axis, mode)?;
            }
        }
        Ok(())
    }

    /// Checkpoint records: `adam.step`, `adam.m.<name>`, `adam.v.<name>`.
    pub fn records<'a>(&'a self, model: &Model<T>, step: &'a Tensor<T>) -> Vec<(String, &'a Tensor<T>)> {
        let mut out = vec![("adam.step".to_string(), step)];
        for (i, p) in model.params().iter().enumerate() {
            out.push((format!("adam.m.{}", p.spec.name), &self.m[i]));
            out.push((format!("adam.v.{}", p.spec.name), &self.v[i]));
        }
        out
    }

    pub fn step_tensor(&self) -> Tensor<T> {
        Tensor::scalar(T::of(self.step as f64))
    }

    /// Rebuilds the state from checkpoint leftovers produced by
    /// [`Model::from_checkpoint`].
    pub fn from_records(
        model: &Model<T>,
        config: &OptimConfig,
        ck: &mut crate::arch::Checkpoint<T>,
    ) -> Result<Self> {
        let mut s = Self::new(model, config)?;
        let step = ck
            .take("adam.step")
            .ok_or_else(|| Error::Format("checkpoint has no optimizer state".into()))?;
        s.step = step.item().f64() as u64;
        for (i, p) in model.params().iter().enumerate() {
            for (key, slot) in [("m", &mut s.m[i]), ("v", &mut s.v[i])] {
                let name = format!("adam.{key}.{}", p.spec.name);
                let t = ck.take(&name).ok_or_else(|| Error::Format(format!("missing `{name}`")))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::Format(format!("`{name}` has the wrong shape")));
                }
                *slot = t;
            }
        }
        Ok(s)
    }
}

/// Outcome of one [`train_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// 1-based index of the completed step.
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub clip_scale: f64,
    /// Trace of the forward pass of this step (weights before the update).
    pub trace: Option<BlockTrace>,
}

/// Epsilon guarding the L2/RMS normalizations during training.
pub const TRAIN_NORM_EPS: f64 = 1e-8;

/// forward → loss → backward → clip → Adam step → constraint.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    batch: &Batch,
    state: &mut OptimState<T>,
    trace: bool,
) -> Result<StepReport> {
    let schedule = state.config.schedule();
    let lr = lr_at(&schedule, state.step.min(schedule.total_steps))?;
    let mut tape = Tape::<T>::with_eps(TRAIN_NORM_EPS);
    let fwd = model.forward(&mut tape, &batch.inputs, batch.batch, batch.seq, true, trace)?;
    let loss = tape.cross_entropy(fwd.logits, &batch.targets)?;
    let loss_value = tape.value(loss).item().f64();
    let next = state.step + 1;
    if !loss_value.is_finite() {
        return Err(Error::NumericalFailure {
            step: next,
            detail: format!("loss is {loss_value}"),
        });
    }
    let mut g = tape.backward(loss)?;
    let mut grads: Vec<Tensor<T>> = fwd
        .params
        .iter()
        .map(|&v| g.take(v).expect("parameter gradient"))
        .collect();
    let grad_norm = global_norm(&grads);
    if !grad_norm.is_finite() {
        return Err(Error::NumericalFailure {
            step: next,
            detail: format!("gradient norm is {grad_norm}"),
        });
    }
    let clip_scale = clip_gradients(&mut grads, state.config.clip_norm);
    state.step(model, &grads, lr)?;
    Ok(StepReport {
        step: state.step,
        loss: loss_value,
        lr,
        grad_norm,
        clip_scale,
        trace: fwd.trace,
    })
}

/// Mean cross-entropy without touching the model.
pub fn eval_loss<T: Real>(model: &Model<T>, batch: &Batch) -> Result<f64> {
    let mut tape = Tape::<T>::with_eps(TRAIN_NORM_EPS);
    let fwd = model.forward(&mut tape, &batch.inputs, batch.batch, batch.seq, false, false)?;
    let loss = tape.cross_entropy(fwd.logits, &batch.targets)?;
    Ok(tape.value(loss).item().f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::Constraint;

    fn sched(w: f64) -> Schedule {
        Schedule {
            base_lr: 1e-3,
            total_steps: 100,
            warmup_fraction: w,
            decay_factor: 0.01,
        }
    }

    #[test]
    fn lr_examples() {
        assert_eq!(lr_at(&sched(0.1), 0).unwrap(), 0.0);
        assert!((lr_at(&sched(0.1), 100).unwrap() - 1e-5).abs() < 1e-18);
        assert_eq!(lr_at(&sched(0.0), 0).unwrap(), 1e-3);
        assert_eq!(lr_at(&sched(0.1), 10).unwrap(), 1e-3);
        assert!(lr_at(&sched(0.1), 101).is_err());
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![Tensor::<f64>::from_f64(vec![2], &[2.0, 0.0]).unwrap()];
        assert_eq!(clip_gradients(&mut g, 1.0), 0.5);
        assert_eq!(g[0].data(), &[1.0, 0.0]);
        let mut g = vec![Tensor::<f64>::from_f64(vec![1], &[0.3]).unwrap()];
        assert_eq!(clip_gradients(&mut g, 1.0), 1.0);
    }

    #[test]
    fn constraint_examples() {
        let mut t = Tensor::<f64>::from_f64(vec![1, 2], &[3.0, 4.0]).unwrap();
        apply_constraint(&mut t, Constraint::Rows, ConstraintMode::BoundRows).unwrap();
        assert!((t.data()[0] - 0.6).abs() < 1e-15 && (t.data()[1] - 0.8).abs() < 1e-15);
        let mut t = Tensor::<f64>::from_f64(vec![1, 2], &[0.3, 0.4]).unwrap();
        apply_constraint(&mut t, Constraint::Rows, ConstraintMode::BoundRows).unwrap();
        assert_eq!(t.data(), &[0.3, 0.4]);
        apply_constraint(&mut t, Constraint::Rows, ConstraintMode::NormalizeRows).unwrap();
        assert!((t.data()[0] - 0.6).abs() < 1e-15 && (t.data()[1] - 0.8).abs() < 1e-15);
        let mut z = Tensor::<f64>::zeros(vec![1, 2]);
        assert!(apply_constraint(&mut z, Constraint::Rows, ConstraintMode::NormalizeRows).is_err());
    }

    #[test]
    fn defaults_follow_variant_and_size() {
        let c = OptimConfig::new(1e-3, 10);
        let g = c.materialized(Variant::GptPlus, 1000);
        assert_eq!((g.warmup_fraction, g.weight_decay, g.beta2), (Some(0.1), Some(0.1), Some(0.99)));
        let a = c.materialized(Variant::Angpt, BETA2_SWITCH);
        assert_eq!((a.warmup_fraction, a.weight_decay, a.beta2), (Some(0.0), Some(0.0), Some(0.95)));
        assert_eq!(a.constraint, Some(ConstraintMode::BoundRows));
    }
}
