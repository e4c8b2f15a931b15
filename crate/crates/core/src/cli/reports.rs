use std::path::Path;

use crate::arch::{ModelConfig, NuPMode, Variant};
use crate::error::{Error, Result};
use crate::instrument::{
    line_chart, momentum_rel_variance, norm_ratio_report, power_law_fit, read_metrics, repeated_token_batch,
    robustness_probe, series_of, write_csv, MetricRecord, MomentTrace, NormRatioRow, PowerLawFit, RobustnessReport,
};
use crate::ndmath::Real;
use crate::normfactor::{
    concentration_check, contraction_demo, estimation_error_report, resolve_factors, residual_growth_demo,
    ConcentrationMap, ConcentrationReport, ContractionReport, FactorError, NormFactorSet, ResidualGrowthRow,
};

pub(crate) fn num(v: f64) -> String {
    format!("{v}")
}

fn write_svg(path: &Path, svg: String) -> Result<()> {
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// anGPT factor set for a width with the default ablation switches.
pub fn factor_set(d_model: usize, d_head: usize, nu_p_mode: NuPMode) -> Result<NormFactorSet> {
    if d_model == 0 || d_head == 0 || d_model % d_head != 0 {
        return Err(Error::invalid(format!(
            "--d-model {d_model} must be a positive multiple of --d-head {d_head}"
        )));
    }
    let mut cfg = ModelConfig::new(Variant::Angpt, d_model, 1, d_model / d_head, 2, 1);
    cfg.factors.nu_p_mode = nu_p_mode;
    Ok(resolve_factors(&cfg))
}

/// `factors.csv` with the constant factors and, when `samples` is given,
/// `factor_errors.csv` with the Monte Carlo comparison.
pub fn factors_report(
    set: &NormFactorSet,
    d_model: usize,
    samples: Option<usize>,
    seed: u64,
    out: &Path,
) -> Result<Option<Vec<FactorError>>> {
    ensure_dir(out)?;
    let rows: Vec<Vec<String>> = set
        .constants()
        .iter()
        .map(|(n, v)| vec![n.to_string(), num(*v)])
        .collect();
    write_csv(&out.join("factors.csv"), &["factor", "value"], &rows)?;
    let Some(n) = samples else { return Ok(None) };
    let errs = estimation_error_report(set, d_model, n, seed)?;
    let rows: Vec<Vec<String>> = errs
        .iter()
        .map(|e| {
            vec![
                e.name.clone(),
                e.d_model.to_string(),
                num(e.analytic),
                num(e.empirical),
                num(e.rel_error),
                e.gated.to_string(),
            ]
        })
        .collect();
    write_csv(
        &out.join("factor_errors.csv"),
        &["factor", "d_model", "analytic", "empirical", "rel_error", "gated"],
        &rows,
    )?;
    Ok(Some(errs))
}

pub fn concentration_report(
    map: ConcentrationMap,
    dims: &[usize],
    samples: usize,
    seed: u64,
    out: &Path,
) -> Result<(ConcentrationReport, f64)> {
    let rep = concentration_check(map, dims, samples, seed)?;
    let slope = rep.log_log_slope()?;
    ensure_dir(out)?;
    let rows: Vec<Vec<String>> = rep
        .rows
        .iter()
        .map(|r| {
            vec![
                r.d.to_string(),
                num(r.mean_norm),
                num(r.std_norm),
                r.sample_count.to_string(),
                r.seed.to_string(),
            ]
        })
        .collect();
    write_csv(
        &out.join("concentration.csv"),
        &["d", "mean_norm", "std_norm", "samples", "seed"],
        &rows,
    )?;
    let pts = rep
        .rows
        .iter()
        .map(|r| ((r.d as f64).log10(), r.std_norm.log10()))
        .collect();
    write_svg(
        &out.join("concentration.svg"),
        line_chart(
            &format!("norm concentration (slope {slope:.3})"),
            "log10 d",
            "log10 std",
            &[("std of output norm".into(), pts)],
        ),
    )?;
    Ok((rep, slope))
}

pub fn contraction_report(lambdas: &[f64], steps: usize, out: &Path) -> Result<ContractionReport> {
    let rep = contraction_demo(lambdas, steps)?;
    ensure_dir(out)?;
    write_csv(
        &out.join("contraction_summary.csv"),
        &["alpha_star", "rho_max", "kappa"],
        &[vec![num(rep.alpha_star), num(rep.rho_max), num(rep.kappa)]],
    )?;
    let mut header = vec!["step".to_string(), "norm".to_string(), "preconditioned_norm".to_string()];
    header.extend((0..lambdas.len()).map(|i| format!("x{i}")));
    let rows: Vec<Vec<String>> = rep
        .iterates
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let mut r = vec![k.to_string(), num(rep.iterate_norms[k]), num(rep.preconditioned_norms[k])];
            r.extend(x.iter().map(|v| num(*v)));
            r
        })
        .collect();
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&out.join("contraction.csv"), &h, &rows)?;
    let to_pts = |v: &[f64]| v.iter().enumerate().map(|(k, y)| (k as f64, *y)).collect();
    write_svg(
        &out.join("contraction.svg"),
        line_chart(
            "gradient descent on a diagonal quadratic",
            "step",
            "‖x‖",
            &[
                ("plain at α*".into(), to_pts(&rep.iterate_norms)),
                ("preconditioned".into(), to_pts(&rep.preconditioned_norms)),
            ],
        ),
    )?;
    Ok(rep)
}

pub fn residual_growth_report(
    layers: usize,
    d: usize,
    samples: usize,
    seed: u64,
    alpha: f64,
    out: &Path,
) -> Result<Vec<ResidualGrowthRow>> {
    let rows = residual_growth_demo(layers, d, samples, seed, alpha)?;
    ensure_dir(out)?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.l.to_string(), num(r.additive), num(r.lerp), num((r.l as f64).sqrt())])
        .collect();
    write_csv(&out.join("residual_growth.csv"), &["layer", "additive", "lerp", "sqrt_layer"], &table)?;
    let pts = |f: &dyn Fn(&ResidualGrowthRow) -> f64| rows.iter().map(|r| (r.l as f64, f(r))).collect();
    write_svg(
        &out.join("residual_growth.svg"),
        line_chart(
            "residual stream norm",
            "layer",
            "mean norm",
            &[
                ("additive".into(), pts(&|r| r.additive)),
                ("normalized lerp".into(), pts(&|r| r.lerp)),
                ("√L".into(), pts(&|r| (r.l as f64).sqrt())),
            ],
        ),
    )?;
    Ok(rows)
}

pub fn norm_ratio_file<T: Real>(
    model: &crate::arch::Model<T>,
    batches: &[crate::data::Batch],
    out: &Path,
) -> Result<Vec<NormRatioRow>> {
    let rows = norm_ratio_report(model, batches)?;
    ensure_dir(out)?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.layer.to_string(), r.block.to_string(), num(r.ratio)])
        .collect();
    write_csv(&out.join("norm_ratio.csv"), &["layer", "block", "ratio"], &table)?;
    Ok(rows)
}

pub fn robustness_file<T: Real>(
    model: &crate::arch::Model<T>,
    text: &crate::data::Batch,
    token: usize,
    out: &Path,
) -> Result<RobustnessReport> {
    if token >= model.config().vocab_size {
        return Err(Error::invalid(format!(
            "--repeat-token {token} is outside the vocabulary of {}",
            model.config().vocab_size
        )));
    }
    let rep = robustness_probe(model, text, &repeated_token_batch(token, text.batch, text.seq))?;
    ensure_dir(out)?;
    let table: Vec<Vec<String>> = rep
        .rows
        .iter()
        .map(|r| vec![r.kind.to_string(), num(r.mean), num(r.std)])
        .collect();
    write_csv(&out.join("robustness.csv"), &["input", "mean_norm", "std_norm"], &table)?;
    Ok(rep)
}

fn grouped(records: &[MetricRecord], prefix: &str) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut names: Vec<&str> = records
        .iter()
        .filter_map(|r| r.series.strip_prefix(prefix).map(|_| r.series.as_str()))
        .collect();
    names.sort_unstable();
    names.dedup();
    names
        .into_iter()
        .map(|n| {
            let pts = series_of(records, n).into_iter().map(|(s, v)| (s as f64, v)).collect();
            (n.trim_start_matches(prefix).to_string(), pts)
        })
        .collect()
}

/// `alpha.csv` and `alpha.svg` from the α series of a run.
pub fn alpha_file(metrics: &Path, out: &Path) -> Result<usize> {
    let recs = read_metrics(metrics)?;
    let mut series = grouped(&recs, "alpha_attn/");
    for (n, _) in series.iter_mut() {
        *n = format!("attn {n}");
    }
    series.extend(grouped(&recs, "alpha_mlp/").into_iter().map(|(n, p)| (format!("mlp {n}"), p)));
    if series.is_empty() {
        return Err(Error::invalid(format!("{}: no α series recorded", metrics.display())));
    }
    ensure_dir(out)?;
    let mut rows = Vec::new();
    for (n, pts) in &series {
        rows.extend(pts.iter().map(|(s, v)| vec![n.clone(), num(*s), num(*v)]));
    }
    write_csv(&out.join("alpha.csv"), &["series", "step", "alpha"], &rows)?;
    write_svg(&out.join("alpha.svg"), line_chart("mean α per layer", "step", "α", &series))?;
    Ok(series.len())
}

/// Relative first-moment variance per matrix from `moment_var/*`.
pub fn momentum_from_metrics(records: &[MetricRecord]) -> Result<Vec<(String, Vec<(u64, f64)>)>> {
    let groups = grouped(records, "moment_var/");
    let trace = MomentTrace {
        groups: groups
            .iter()
            .map(|(n, p)| (n.clone(), p.iter().map(|x| x.1).collect()))
            .collect(),
    };
    let rel = momentum_rel_variance(&trace)?;
    Ok(rel
        .into_iter()
        .zip(&groups)
        .map(|((n, v), (_, p))| (n, p.iter().map(|x| x.0 as u64).zip(v).collect()))
        .collect())
}

pub fn momentum_file(metrics: &Path, out: &Path) -> Result<usize> {
    let recs = read_metrics(metrics)?;
    let rel = momentum_from_metrics(&recs)?;
    if rel.is_empty() {
        return Err(Error::invalid(format!("{}: no moment_var series recorded", metrics.display())));
    }
    ensure_dir(out)?;
    let mut rows = Vec::new();
    for (n, pts) in &rel {
        rows.extend(pts.iter().map(|(s, v)| vec![n.clone(), s.to_string(), num(*v)]));
    }
    write_csv(&out.join("momentum.csv"), &["param", "step", "rel_variance"], &rows)?;
    let series: Vec<(String, Vec<(f64, f64)>)> = rel
        .iter()
        .map(|(n, p)| (n.clone(), p.iter().map(|(s, v)| (*s as f64, *v)).collect()))
        .collect();
    write_svg(
        &out.join("momentum.svg"),
        line_chart("relative first-moment variance", "step", "V(m) / ΣV(m)", &series),
    )?;
    Ok(rel.len())
}

/// Reads `x,y` pairs from a two-column CSV with a header row.
pub fn read_points(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("{}: line {}: expected `x,y`", path.display(), i + 1));
        let mut it = line.split(',');
        let x = it.next().and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
        let y = it.next().and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
        pts.push((x, y));
    }
    Ok(pts)
}

pub fn fit_file(points: &[(f64, f64)], out: &Path) -> Result<PowerLawFit> {
    let fit = power_law_fit(points)?;
    ensure_dir(out)?;
    write_csv(
        &out.join("fit.csv"),
        &["coefficient", "exponent", "residual"],
        &[vec![num(fit.coefficient), num(fit.exponent), num(fit.residual)]],
    )?;
    Ok(fit)
}
