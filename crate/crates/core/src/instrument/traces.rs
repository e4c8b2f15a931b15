use serde::Serialize;

use super::metrics::MetricRecord;
use crate::arch::{constraint_norms, token_norms, BlockTrace, Model, Role};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::ndmath::{Real, Tape};
use crate::optim::OptimState;

/// Mean block-input norm per layer: `block_in_norm/layer_{l}`.
pub fn trace_block_norms(trace: &BlockTrace, step: u64) -> Vec<MetricRecord> {
    trace
        .layers
        .iter()
        .enumerate()
        .map(|(l, t)| MetricRecord::new(step, format!("block_in_norm/layer_{l}"), t.block_in))
        .collect()
}

/// Mean effective α per layer: `alpha_attn/layer_{l}`, `alpha_mlp/layer_{l}`.
pub fn trace_alphas<T: Real>(model: &Model<T>, step: u64) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for (l, li) in model.index().layers.iter().enumerate() {
        for (kind, idx) in [("attn", li.alpha_attn), ("mlp", li.alpha_mlp)] {
            let i = idx.ok_or_else(|| {
                Error::invalid(format!("variant {} has no interpolation weights", model.config().variant))
            })?;
            let a = model.effective(i);
            out.push(MetricRecord::new(
                step,
                format!("alpha_{kind}/layer_{l}"),
                a.iter().sum::<f64>() / a.len() as f64,
            ));
        }
    }
    Ok(out)
}

/// Mean norm of the constrained slices of every constrained matrix:
/// `row_norm/<param>`.
pub fn trace_row_norms<T: Real>(model: &Model<T>, step: u64) -> Vec<MetricRecord> {
    model
        .params()
        .iter()
        .filter_map(|p| {
            let c = p.spec.role.constraint()?;
            let n = constraint_norms(&p.value, c);
            let mean = n.iter().sum::<f64>() / n.len() as f64;
            Some(MetricRecord::new(step, format!("row_norm/{}", p.spec.name), mean))
        })
        .collect()
}

/// Largest constrained-slice norm in the model.
pub fn max_row_norm<T: Real>(model: &Model<T>) -> f64 {
    model
        .params()
        .iter()
        .filter_map(|p| {
            let c = p.spec.role.constraint()?;
            constraint_norms(&p.value, c).into_iter().reduce(f64::max)
        })
        .fold(0.0, f64::max)
}

/// Norm of every RMSNorm gain: `gamma_norm/<param>`.
pub fn trace_gamma_norms<T: Real>(model: &Model<T>, step: u64) -> Vec<MetricRecord> {
    model
        .params()
        .iter()
        .filter(|p| p.spec.role == Role::Gain)
        .map(|p| {
            let n = p.value.sum_squares().sqrt();
            MetricRecord::new(step, format!("gamma_norm/{}", p.spec.name), n)
        })
        .collect()
}

/// Per-matrix time series of the variance of the first-moment entries.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MomentTrace {
    pub groups: Vec<(String, Vec<f64>)>,
}

fn variance<T: Real>(v: &[T]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().map(|x| x.f64()).sum::<f64>() / n;
    v.iter().map(|x| (x.f64() - mean).powi(2)).sum::<f64>() / n
}

impl MomentTrace {
    /// Appends `V(m_t)` for every matrix parameter.
    pub fn record<T: Real>(&mut self, model: &Model<T>, state: &OptimState<T>) {
        let mats = model.params().iter().enumerate().filter(|(_, p)| p.spec.role.is_matrix());
        for (k, (i, p)) in mats.enumerate() {
            if self.groups.len() <= k {
                self.groups.push((p.spec.name.clone(), Vec::new()));
            }
            self.groups[k].1.push(variance(state.m[i].data()));
        }
    }
}

/// Each group's series divided by its total.
pub fn momentum_rel_variance(trace: &MomentTrace) -> Result<Vec<(String, Vec<f64>)>> {
    trace
        .groups
        .iter()
        .map(|(name, s)| {
            let total: f64 = s.iter().sum();
            if !(total > 0.0) {
                return Err(Error::degenerate(
                    "momentum_rel_variance",
                    format!("first-moment variance of `{name}` is zero at every step"),
                ));
            }
            Ok((name.clone(), s.iter().map(|v| v / total).collect()))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NormRatioRow {
    pub layer: usize,
    pub block: &'static str,
    /// Mean residual-stream norm after the block over the mean before it.
    pub ratio: f64,
}

/// Two rows per layer (attention, MLP), averaged over `batches`.
pub fn norm_ratio_report<T: Real>(model: &Model<T>, batches: &[Batch]) -> Result<Vec<NormRatioRow>> {
    if batches.is_empty() {
        return Err(Error::invalid("norm_ratio_report: no batches"));
    }
    let n = model.config().n_layers;
    let mut acc = vec![[0.0f64; 3]; n];
    for b in batches {
        let t = model.trace(&b.inputs, b.batch, b.seq)?;
        for (a, l) in acc.iter_mut().zip(&t.layers) {
            a[0] += l.block_in;
            a[1] += l.post_attn;
            a[2] += l.post_mlp;
        }
    }
    let mut rows = Vec::with_capacity(2 * n);
    for (l, a) in acc.iter().enumerate() {
        rows.push(NormRatioRow {
            layer: l,
            block: "attention",
            ratio: a[1] / a[0],
        });
        rows.push(NormRatioRow {
            layer: l,
            block: "mlp",
            ratio: a[2] / a[1],
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustnessRow {
    pub kind: &'static str,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustnessReport {
    pub rows: Vec<RobustnessRow>,
    /// Text mean over repeated-token mean.
    pub ratio: f64,
}

fn final_norms<T: Real>(model: &Model<T>, b: &Batch) -> Result<Vec<f64>> {
    let mut tape = Tape::<T>::with_eps(crate::optim::TRAIN_NORM_EPS);
    let out = model.forward(&mut tape, &b.inputs, b.batch, b.seq, false, true)?;
    Ok(out.trace.map(|t| t.final_norms).unwrap_or_default())
}

/// Pre-head residual-stream norms on natural text versus a sequence of
/// one repeated token.
pub fn robustness_probe<T: Real>(model: &Model<T>, text: &Batch, repeated: &Batch) -> Result<RobustnessReport> {
    if text.batch != repeated.batch || text.seq != repeated.seq {
        return Err(Error::shape("robustness_probe", "inputs differ in shape"));
    }
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
    };
    let (tm, ts) = stats(&final_norms(model, text)?);
    let (rm, rs) = stats(&final_norms(model, repeated)?);
    Ok(RobustnessReport {
        rows: vec![
            RobustnessRow {
                kind: "text",
                mean: tm,
                std: ts,
            },
            RobustnessRow {
                kind: "repeated",
                mean: rm,
                std: rs,
            },
        ],
        ratio: tm / rm,
    })
}

/// Batch of `batch` rows of `length` copies of `token`.
pub fn repeated_token_batch(token: usize, batch: usize, length: usize) -> Batch {
    Batch {
        inputs: vec![token; batch * length],
        targets: vec![token; batch * length],
        batch,
        seq: length,
        starts: vec![0; batch],
    }
}

/// Mean per-token norm of a token matrix (`[n, d]`).
pub fn mean_token_norm<T: Real>(t: &crate::ndmath::Tensor<T>) -> f64 {
    let n = token_norms(t);
    n.iter().sum::<f64>() / n.len() as f64
}
