use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{load_stream, Precision, RunConfig};
use crate::arch::{encode, model_records, write_file, Model, Variant};
use crate::data::{sample_batches, Batch, TokenStream};
use crate::error::{Error, Result};
use crate::instrument::{
    line_chart, max_row_norm, trace_alphas, trace_block_norms, trace_gamma_norms, trace_row_norms, MetricRecord,
    MetricSink,
};
use crate::ndmath::Real;
use crate::optim::{eval_loss, train_step, OptimState, StepReport};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub steps: u64,
    pub param_count: usize,
    pub final_train_loss: f64,
    pub final_eval_loss: f64,
    #[serde(skip)]
    pub metrics: Vec<MetricRecord>,
}

/// Train/eval split of the configured corpus plus the fixed eval batches.
pub struct Prepared {
    pub train: TokenStream,
    pub eval: TokenStream,
}

impl Prepared {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let (train, eval) = load_stream(cfg)?.split(cfg.data.eval_fraction);
        Ok(Prepared { train, eval })
    }

    pub fn eval_batches(&self, cfg: &RunConfig) -> Result<Vec<Batch>> {
        let d = &cfg.data;
        let seed = d.seed.unwrap_or(cfg.seed).wrapping_add(1);
        let b = d.eval_batch_size.unwrap_or(d.batch_size);
        Ok(sample_batches(&self.eval, b, d.seq_len, seed)?
            .take(d.eval_batches)
            .collect())
    }
}

fn mean_eval<T: Real>(model: &Model<T>, batches: &[Batch]) -> Result<f64> {
    let mut s = 0.0;
    for b in batches {
        s += eval_loss(model, b)?;
    }
    Ok(s / batches.len() as f64)
}

fn every(step: u64, k: u64) -> bool {
    k > 0 && step % k == 0
}

/// Model and optimizer state in one container.
pub fn checkpoint_bytes<T: Real>(model: &Model<T>, state: &OptimState<T>) -> Result<Vec<u8>> {
    let step = state.step_tensor();
    let mut recs = model_records(model);
    recs.extend(state.records(model, &step));
    encode(model.config(), &recs)
}

/// Trains per `cfg`. With `out` the run writes `config.json`,
/// `metrics.jsonl`, checkpoints, `summary.json` and `loss.svg` there.
/// `hook` sees the model after every step.
pub fn train_with<T: Real>(
    cfg: &RunConfig,
    data: &Prepared,
    out: Option<&Path>,
    mut hook: impl FnMut(&Model<T>, &OptimState<T>, &StepReport),
) -> Result<RunSummary> {
    cfg.validate()?;
    let cfg = cfg.materialized();
    let t = &cfg.train;
    let mut sink = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("config.json");
            let json = serde_json::to_string_pretty(&cfg)? + "\n";
            std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
            MetricSink::to_file(&dir.join("metrics.jsonl"), t.flush_every)?
        }
        None => MetricSink::memory(),
    };
    let mut model = Model::<T>::build(&cfg.model, cfg.seed)?;
    let mut state = OptimState::new(&model, &cfg.optim)?;
    let eval = data.eval_batches(&cfg)?;
    let data_seed = cfg.data.seed.unwrap_or(cfg.seed);
    let mut batches = sample_batches(&data.train, cfg.data.batch_size, cfg.data.seq_len, data_seed)?;
    let normalized = cfg.model.variant.is_normalized();
    let mut last_loss = f64::NAN;

    for _ in 0..cfg.optim.total_steps {
        let step = state.step + 1;
        let want_trace = every(step, t.trace_every) || (t.trace_every > 0 && step == 1);
        let batch = batches.next().expect("sampler is endless");
        let r = train_step(&mut model, &batch, &mut state, want_trace)?;
        last_loss = r.loss;
        if every(step, t.log_every) || step == 1 {
            sink.extend([
                MetricRecord::new(step, "train/loss", r.loss),
                MetricRecord::new(step, "train/lr", r.lr),
                MetricRecord::new(step, "train/grad_norm", r.grad_norm),
                MetricRecord::new(step, "train/clip_scale", r.clip_scale),
            ])?;
        }
        if let Some(tr) = &r.trace {
            sink.extend(trace_block_norms(tr, step))?;
            if normalized {
                sink.extend(trace_alphas(&model, step)?)?;
                sink.extend(trace_row_norms(&model, step))?;
                sink.push(MetricRecord::new(step, "row_norm_max", max_row_norm(&model)))?;
            } else {
                sink.extend(trace_gamma_norms(&model, step))?;
            }
        }
        if every(step, t.moment_every) {
            for (i, p) in model.params().iter().enumerate() {
                if p.spec.role.is_matrix() {
                    let v = variance(state.m[i].data());
                    sink.push(MetricRecord::new(step, format!("moment_var/{}", p.spec.name), v))?;
                }
            }
        }
        if every(step, t.eval_every) && step < cfg.optim.total_steps {
            sink.push(MetricRecord::new(step, "eval/loss", mean_eval(&model, &eval)?))?;
        }
        if let Some(dir) = out {
            if every(step, t.checkpoint_every) && step < cfg.optim.total_steps {
                let p = dir.join("checkpoints").join(format!("step_{step:06}.anck"));
                write_file(&p, &checkpoint_bytes(&model, &state)?)?;
            }
        }
        hook(&model, &state, &r);
    }

    let steps = state.step;
    let final_eval = mean_eval(&model, &eval)?;
    if !final_eval.is_finite() {
        return Err(Error::NumericalFailure {
            step: steps,
            detail: format!("eval loss is {final_eval}"),
        });
    }
    sink.push(MetricRecord::new(steps, "eval/loss", final_eval))?;
    sink.flush()?;
    let summary = RunSummary {
        variant: cfg.model.variant,
        steps,
        param_count: model.param_count(),
        final_train_loss: last_loss,
        final_eval_loss: final_eval,
        metrics: sink.records().to_vec(),
    };
    if let Some(dir) = out {
        write_file(&dir.join("final.anck"), &checkpoint_bytes(&model, &state)?)?;
        let p = dir.join("summary.json");
        std::fs::write(&p, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&p, e))?;
        let series = |name: &str| -> Vec<(f64, f64)> {
            sink.series(name).into_iter().map(|(s, v)| (s as f64, v)).collect()
        };
        let svg = line_chart(
            &format!("{} loss", cfg.model.variant),
            "step",
            "cross-entropy",
            &[("train".into(), series("train/loss")), ("eval".into(), series("eval/loss"))],
        );
        let p = dir.join("loss.svg");
        std::fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;
    }
    Ok(summary)
}

fn variance<T: Real>(v: &[T]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().map(|x| x.f64()).sum::<f64>() / n;
    v.iter().map(|x| (x.f64() - mean).powi(2)).sum::<f64>() / n
}

/// Loads the data and trains in the configured precision.
pub fn train(cfg: &RunConfig, out: Option<&Path>) -> Result<RunSummary> {
    let data = Prepared::load(cfg)?;
    match cfg.precision {
        Precision::F32 => train_with::<f32>(cfg, &data, out, |_, _, _| {}),
        Precision::F64 => train_with::<f64>(cfg, &data, out, |_, _, _| {}),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareReport {
    pub a: RunSummary,
    pub b: RunSummary,
    /// `(b − a)/a` of the final eval losses.
    pub rel_diff: f64,
}

/// Aligns `b` with `a`: same data, seed, step budget and logging.
pub fn paired(a: &RunConfig, b: &RunConfig, steps: Option<u64>) -> (RunConfig, RunConfig) {
    let mut a = a.clone();
    let mut b = b.clone();
    if let Some(n) = steps {
        a.optim.total_steps = n;
    }
    b.optim.total_steps = a.optim.total_steps;
    b.data = a.data.clone();
    b.seed = a.seed;
    b.precision = a.precision;
    b.train = a.train.clone();
    (a, b)
}

/// Trains both runs of a pair; outputs go to `out/a` and `out/b`.
pub fn compare(a: &RunConfig, b: &RunConfig, steps: Option<u64>, out: Option<&Path>) -> Result<CompareReport> {
    let (a, b) = paired(a, b, steps);
    a.validate()?;
    b.validate()?;
    let data = Prepared::load(&a)?;
    let sub = |k: &str| out.map(|d| d.join(k));
    let run = |c: &RunConfig, dir: Option<PathBuf>| match c.precision {
        Precision::F32 => train_with::<f32>(c, &data, dir.as_deref(), |_, _, _| {}),
        Precision::F64 => train_with::<f64>(c, &data, dir.as_deref(), |_, _, _| {}),
    };
    let ra = run(&a, sub("a"))?;
    let rb = run(&b, sub("b"))?;
    let rel_diff = (rb.final_eval_loss - ra.final_eval_loss) / ra.final_eval_loss;
    Ok(CompareReport { a: ra, b: rb, rel_diff })
}
