//! `anlab` command-line frontend.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 numerical failure,
//! 3 IO or file-format error. Relative output paths resolve under
//! `$AN_LAB_OUT` when it is set.

mod config;
mod reports;
mod run;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::{
    load_stream, resolve_output, DataConfig, DataSource, Precision, RunConfig, TrainConfig, OUT_ENV, SCHEMA_VERSION,
};
pub use reports::{
    alpha_file, concentration_report, contraction_report, factor_set, factors_report, fit_file, momentum_file,
    momentum_from_metrics, norm_ratio_file, read_points, residual_growth_report, robustness_file,
};
pub use run::{checkpoint_bytes, compare, paired, train, train_with, CompareReport, Prepared, RunSummary};

use crate::arch::{group_counts, param_count, write_file, Model, ModelConfig, NuPMode, PresetSize, Variant};
use crate::data::sample_batches;
use crate::error::{Error, Result};
use crate::instrument::{read_metrics, series_of, write_csv};
use crate::ndmath::Real;
use crate::normfactor::ConcentrationMap;
use crate::optim::OptimState;

#[derive(Parser, Debug)]
#[command(name = "anlab", version, about = "Approximately normalized transformer lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train a model from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` of the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the initial model of a run config as a checkpoint.
    Init {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-group and total parameter counts.
    Params(ParamsArgs),
    /// Normalization factors for one width, optionally checked by Monte Carlo.
    Factors {
        #[arg(long, default_value_t = 1024)]
        d_model: usize,
        #[arg(long, default_value_t = 64)]
        d_head: usize,
        #[arg(long, value_enum, default_value_t = NuPArg::HeadInput)]
        nu_p_mode: NuPArg,
        /// Monte Carlo samples for the estimation-error table.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs/factors")]
        out: PathBuf,
    },
    /// Spread of output norms across widths.
    Concentration {
        #[arg(long, value_delimiter = ',', default_values_t = [64, 256, 1024, 4096])]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 10000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = MapArg::Linear)]
        map: MapArg,
        /// Output rows per input dimension of the linear map.
        #[arg(long, default_value_t = 1.0)]
        out_ratio: f64,
        #[arg(long, default_value = "runs/concentration")]
        out: PathBuf,
    },
    /// Gradient descent on a diagonal quadratic with and without preconditioning.
    Contraction {
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 9.0])]
        lambdas: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value = "runs/contraction")]
        out: PathBuf,
    },
    /// Residual-stream norm growth with and without normalized interpolation.
    ResidualGrowth {
        #[arg(long, default_value_t = 64)]
        layers: usize,
        #[arg(long, default_value_t = 1024)]
        d_model: usize,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value = "runs/residual_growth")]
        out: PathBuf,
    },
    /// Reports on a finished run.
    Analyze {
        #[command(subcommand)]
        what: Analyze,
    },
    /// Train two configs on the same data and budget and compare eval losses.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Step budget for both runs; defaults to that of `a`.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, default_value = "runs/compare")]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
#[group(required = true, multiple = true)]
struct ParamsArgs {
    /// Run config or bare model config.
    #[arg(long, conflicts_with_all = ["variant", "size"])]
    config: Option<PathBuf>,
    #[arg(long, requires = "size")]
    variant: Option<String>,
    #[arg(long, requires = "variant")]
    size: Option<String>,
}

/// Inputs of a run: `--run DIR` or explicit files.
#[derive(Args, Debug, Clone)]
struct RunInputs {
    /// Run directory holding `config.json`, `final.anck`, `metrics.jsonl`.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Defaults to `<run>/analysis`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Analyze {
    /// Mean residual norm after each block over the norm before it.
    NormRatio {
        #[command(flatten)]
        io: RunInputs,
    },
    /// Final residual norms on text versus one repeated token.
    Robustness {
        #[command(flatten)]
        io: RunInputs,
        #[arg(long, default_value_t = 65)]
        repeat_token: usize,
        #[arg(long, default_value_t = 512)]
        length: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
    },
    /// Interpolation weights over training.
    Alpha {
        #[command(flatten)]
        io: RunInputs,
    },
    /// Relative first-moment variance per matrix.
    Momentum {
        #[command(flatten)]
        io: RunInputs,
    },
    /// Power-law fit `y = A·x^b` on a CSV of points or a metrics series.
    Fit {
        #[arg(long, conflicts_with_all = ["metrics", "series"])]
        points: Option<PathBuf>,
        #[arg(long, requires = "series")]
        metrics: Option<PathBuf>,
        #[arg(long)]
        series: Option<String>,
        #[arg(long, default_value = "runs/fit")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NuPArg {
    HeadInput,
    Unity,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MapArg {
    Linear,
    Silu,
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NumericalFailure { .. } => 2,
        Error::Io { .. } | Error::Format(_) => 3,
        _ => 1,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run(args: impl IntoIterator<Item = impl Into<OsString> + Clone>) -> u8 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}

fn out_dir(p: &Path) -> PathBuf {
    resolve_output(p)
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let dir = out.map(|o| out_dir(&o)).unwrap_or_else(|| cfg.output_path());
            let s = train(&cfg, Some(&dir))?;
            println!(
                "{}: {} steps, final train loss {:.4}, eval loss {:.4} -> {}",
                s.variant,
                s.steps,
                s.final_train_loss,
                s.final_eval_loss,
                dir.display()
            );
            Ok(())
        }
        Cmd::Init { config, out } => {
            let cfg = RunConfig::load(&config)?;
            cfg.validate()?;
            let cfg = cfg.materialized();
            let path = out_dir(&out);
            match cfg.precision {
                Precision::F32 => write_init::<f32>(&cfg, &path)?,
                Precision::F64 => write_init::<f64>(&cfg, &path)?,
            }
            println!("{}", path.display());
            Ok(())
        }
        Cmd::Params(a) => {
            let cfg = match (a.config, a.variant, a.size) {
                (Some(p), _, _) => load_model_config(&p)?,
                (None, Some(v), Some(s)) => ModelConfig::preset(v.parse::<Variant>()?, s.parse::<PresetSize>()?),
                _ => return Err(Error::Config("give --config or --variant with --size".into())),
            };
            cfg.validate()?;
            for (g, n) in group_counts(&cfg) {
                println!("{:<12}{n:>14}", g.name());
            }
            let total = param_count(&cfg);
            println!("{:<12}{total:>14}  ({})", "total", human_count(total));
            Ok(())
        }
        Cmd::Factors {
            d_model,
            d_head,
            nu_p_mode,
            samples,
            seed,
            out,
        } => {
            let mode = match nu_p_mode {
                NuPArg::HeadInput => NuPMode::HeadInput,
                NuPArg::Unity => NuPMode::Unity,
            };
            let set = factor_set(d_model, d_head, mode)?;
            let dir = out_dir(&out);
            let errs = factors_report(&set, d_model, samples, seed, &dir)?;
            for (n, v) in set.constants() {
                println!("{n:<8}{v}");
            }
            if let Some(errs) = errs {
                println!();
                for e in errs {
                    println!(
                        "{:<16}analytic {:<12.6} empirical {:<12.6} rel. error {:.4}%{}",
                        e.name,
                        e.analytic,
                        e.empirical,
                        100.0 * e.rel_error,
                        if e.gated { "" } else { "  (not a sphere-model estimate)" }
                    );
                }
            }
            Ok(())
        }
        Cmd::Concentration {
            dims,
            samples,
            seed,
            map,
            out_ratio,
            out,
        } => {
            let m = match map {
                MapArg::Linear => ConcentrationMap::LinearMap { out_ratio },
                MapArg::Silu => ConcentrationMap::SiluGate,
            };
            let (rep, slope) = concentration_report(m, &dims, samples, seed, &out_dir(&out))?;
            for r in &rep.rows {
                println!("d={:<6} mean {:.6} std {:.6}", r.d, r.mean_norm, r.std_norm);
            }
            println!("log-log slope {slope:.4}");
            Ok(())
        }
        Cmd::Contraction { lambdas, steps, out } => {
            let r = contraction_report(&lambdas, steps, &out_dir(&out))?;
            println!("alpha_star {}\nrho_max {}\nkappa {}", r.alpha_star, r.rho_max, r.kappa);
            Ok(())
        }
        Cmd::ResidualGrowth {
            layers,
            d_model,
            samples,
            seed,
            alpha,
            out,
        } => {
            let rows = residual_growth_report(layers, d_model, samples, seed, alpha, &out_dir(&out))?;
            if let Some(r) = rows.last() {
                println!(
                    "L={}: additive {:.4} (√L = {:.4}), lerp {:.4}",
                    r.l,
                    r.additive,
                    (r.l as f64).sqrt(),
                    r.lerp
                );
            }
            Ok(())
        }
        Cmd::Analyze { what } => analyze(what),
        Cmd::Compare { a, b, steps, out } => {
            let (ca, cb) = (RunConfig::load(&a)?, RunConfig::load(&b)?);
            let dir = out_dir(&out);
            let r = compare(&ca, &cb, steps, Some(&dir))?;
            let row = |k: &str, s: &RunSummary, c: &RunConfig| {
                vec![
                    k.to_string(),
                    s.variant.to_string(),
                    reports::num(c.optim.lr),
                    s.steps.to_string(),
                    reports::num(s.final_eval_loss),
                ]
            };
            write_csv(
                &dir.join("compare.csv"),
                &["run", "variant", "lr", "steps", "final_eval_loss"],
                &[row("a", &r.a, &ca), row("b", &r.b, &cb)],
            )?;
            println!("a ({}): eval loss {:.4}", r.a.variant, r.a.final_eval_loss);
            println!("b ({}): eval loss {:.4}", r.b.variant, r.b.final_eval_loss);
            println!("relative difference (b - a)/a: {:+.3}%", 100.0 * r.rel_diff);
            Ok(())
        }
    }
}

fn human_count(n: usize) -> String {
    if n >= 1_000_000_000 {
        format!("{:.3}B", n as f64 / 1e9)
    } else {
        format!("{:.2}M", n as f64 / 1e6)
    }
}

/// Accepts a run config or a bare model config.
fn load_model_config(p: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    if let Ok(r) = RunConfig::from_json(&text) {
        return Ok(r.model);
    }
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
}

fn write_init<T: Real>(cfg: &RunConfig, path: &Path) -> Result<()> {
    let model = Model::<T>::build(&cfg.model, cfg.seed)?;
    let state = OptimState::new(&model, &cfg.optim)?;
    write_file(path, &checkpoint_bytes(&model, &state)?)
}

struct Resolved {
    config: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    metrics: Option<PathBuf>,
    out: PathBuf,
}

fn resolve_inputs(io: RunInputs) -> Result<Resolved> {
    let run = io.run.as_deref().map(out_dir);
    let pick = |explicit: Option<PathBuf>, file: &str| explicit.or_else(|| run.as_ref().map(|r| r.join(file)));
    let out = match (io.out, &run) {
        (Some(o), _) => out_dir(&o),
        (None, Some(r)) => r.join("analysis"),
        (None, None) => return Err(Error::invalid("give --run or --out")),
    };
    Ok(Resolved {
        config: pick(io.config, "config.json"),
        checkpoint: pick(io.checkpoint, "final.anck"),
        metrics: pick(io.metrics, "metrics.jsonl"),
        out,
    })
}

fn need(p: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let p = p.ok_or_else(|| Error::invalid(format!("missing input: {what} (give --run or --{what})")))?;
    if !p.exists() {
        return Err(Error::io(
            &p,
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} not found")),
        ));
    }
    Ok(p)
}

fn analyze(what: Analyze) -> Result<()> {
    match what {
        Analyze::NormRatio { io } => {
            let r = resolve_inputs(io)?;
            let cfg = RunConfig::load(&need(r.config, "config")?)?;
            let ck = need(r.checkpoint, "checkpoint")?;
            let data = Prepared::load(&cfg)?;
            let batches = data.eval_batches(&cfg)?;
            let rows = match cfg.precision {
                Precision::F32 => norm_ratio_file(&Model::<f32>::load(&ck)?, &batches, &r.out)?,
                Precision::F64 => norm_ratio_file(&Model::<f64>::load(&ck)?, &batches, &r.out)?,
            };
            for row in rows {
                println!("layer {:<3} {:<10} {:.4}", row.layer, row.block, row.ratio);
            }
            Ok(())
        }
        Analyze::Robustness {
            io,
            repeat_token,
            length,
            batch,
        } => {
            let r = resolve_inputs(io)?;
            let cfg = RunConfig::load(&need(r.config, "config")?)?;
            let ck = need(r.checkpoint, "checkpoint")?;
            let data = Prepared::load(&cfg)?;
            let seed = cfg.data.seed.unwrap_or(cfg.seed).wrapping_add(2);
            let text = sample_batches(&data.eval, batch, length, seed)?
                .next()
                .expect("sampler is endless");
            let rep = match cfg.precision {
                Precision::F32 => robustness_file(&Model::<f32>::load(&ck)?, &text, repeat_token, &r.out)?,
                Precision::F64 => robustness_file(&Model::<f64>::load(&ck)?, &text, repeat_token, &r.out)?,
            };
            for row in &rep.rows {
                println!("{:<10} mean {:.6} std {:.6}", row.kind, row.mean, row.std);
            }
            println!("ratio text/repeated {:.4}", rep.ratio);
            Ok(())
        }
        Analyze::Alpha { io } => {
            let r = resolve_inputs(io)?;
            let n = alpha_file(&need(r.metrics, "metrics")?, &r.out)?;
            println!("{n} series -> {}", r.out.join("alpha.csv").display());
            Ok(())
        }
        Analyze::Momentum { io } => {
            let r = resolve_inputs(io)?;
            let n = momentum_file(&need(r.metrics, "metrics")?, &r.out)?;
            println!("{n} matrices -> {}", r.out.join("momentum.csv").display());
            Ok(())
        }
        Analyze::Fit {
            points,
            metrics,
            series,
            out,
        } => {
            let pts = match (points, metrics, series) {
                (Some(p), _, _) => read_points(&p)?,
                (None, Some(m), Some(s)) => series_of(&read_metrics(&m)?, &s)
                    .into_iter()
                    .map(|(x, y)| (x as f64, y))
                    .collect(),
                _ => return Err(Error::invalid("give --points or --metrics with --series")),
            };
            let fit = fit_file(&pts, &out_dir(&out))?;
            println!(
                "A = {}\nb = {}\nresidual = {}",
                fit.coefficient, fit.exponent, fit.residual
            );
            Ok(())
        }
    }
}
