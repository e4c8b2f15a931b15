//! Scalar normalization factors and the Monte Carlo machinery that checks
//! them.
//!
//! A factor ν is an input-independent scalar approximating `1/‖g(x)‖` for a
//! primitive `g` fed with unit-norm inputs. All estimators sample inputs
//! as entrywise standard normal vectors projected onto the unit sphere and
//! take explicit seeds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::arch::{AttentionFactorMode, ModelConfig, NuPMode, Variant};
use crate::error::{Error, Result};
use crate::ndmath::{gemm, Layout};

/// `√(d_in/d_out)`, the inverse RMS gain of a row-normalized linear map.
pub fn linear_factor(d_in: usize, d_out: usize) -> Result<f64> {
    if d_in == 0 || d_out == 0 {
        return Err(Error::invalid("linear_factor: zero extent"));
    }
    Ok((d_in as f64 / d_out as f64).sqrt())
}

/// `(1 − 2α + 2α²)^(−1/2)`; defined for every real α.
pub fn lerp_factor(alpha: f64) -> f64 {
    (1.0 - 2.0 * alpha + 2.0 * alpha * alpha).sqrt().recip()
}

/// Factor for the plain sum of two unit vectors.
pub fn classic_residual_factor() -> f64 {
    std::f64::consts::FRAC_1_SQRT_2
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Identity => x,
        }
    }
}

/// Seeded source of uniform points on spheres.
pub struct SphereSampler {
    rng: ChaCha8Rng,
}

impl SphereSampler {
    pub fn new(seed: u64) -> Self {
        SphereSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Overwrites `out` with a uniform point on `S^{len−1}`.
    pub fn fill(&mut self, out: &mut [f64]) {
        loop {
            let mut ss = 0.0;
            for x in out.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut self.rng);
                *x = g;
                ss += g * g;
            }
            if ss > 0.0 {
                let inv = ss.sqrt().recip();
                out.iter_mut().for_each(|x| *x *= inv);
                return;
            }
        }
    }

    pub fn point(&mut self, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        self.fill(&mut v);
        v
    }

    /// `rows × cols` matrix whose rows are independent unit vectors.
    pub fn row_normalized(&mut self, rows: usize, cols: usize) -> Vec<f64> {
        let mut m = vec![0.0; rows * cols];
        for r in m.chunks_mut(cols) {
            self.fill(r);
        }
        m
    }
}

/// `1/√(mean ‖u ⊙ act(z)‖²)` with `u`, `z` independent sphere points.
pub fn activation_factor_mc(act: Activation, dim: usize, samples: usize, seed: u64) -> Result<f64> {
    if samples == 0 || dim == 0 {
        return Err(Error::invalid("activation_factor_mc: samples and dim must be ≥ 1"));
    }
    let mut s = SphereSampler::new(seed);
    let (mut u, mut z) = (vec![0.0; dim], vec![0.0; dim]);
    let mut acc = 0.0;
    for _ in 0..samples {
        s.fill(&mut u);
        s.fill(&mut z);
        acc += u
            .iter()
            .zip(&z)
            .map(|(a, b)| {
                let p = a * act.apply(*b);
                p * p
            })
            .sum::<f64>();
    }
    let mean = acc / samples as f64;
    if mean <= 0.0 || !mean.is_finite() {
        return Err(Error::degenerate("activation_factor_mc", "mean squared norm is 0"));
    }
    Ok(mean.sqrt().recip())
}

/// Row scaling of the attention matrix.
#[derive(Clone, Debug, PartialEq)]
pub enum AttentionScale {
    Dense(f64),
    /// Per-row factors, row `r` (1-indexed) scaled by `√r`.
    Causal(Vec<f64>),
}

impl AttentionScale {
    pub fn row(&self, r: usize) -> f64 {
        match self {
            AttentionScale::Dense(s) => *s,
            AttentionScale::Causal(v) => v[r],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Dense,
    Causal,
}

pub fn attention_factor(kind: AttentionKind, seq_len: usize) -> Result<AttentionScale> {
    if seq_len == 0 {
        return Err(Error::invalid("attention_factor: zero seq_len"));
    }
    Ok(match kind {
        AttentionKind::Dense => AttentionScale::Dense((seq_len as f64).sqrt()),
        AttentionKind::Causal => {
            AttentionScale::Causal((1..=seq_len).map(|r| (r as f64).sqrt()).collect())
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// `(h + α(h_a − h))·ν(α)`
    Lerp,
    /// `(h + h_a)/√2`
    Classic,
    /// interpolation or sum without a factor
    None,
}

/// The resolved factors of one model instance.
///
/// Constant factors already include both global multipliers;
/// `global_scale_all` is kept separately because it also multiplies the
/// residual factor at run time.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NormFactorSet {
    pub nu_qkv: f64,
    pub nu_p: f64,
    pub nu_uz: f64,
    pub nu_acf: f64,
    pub nu_d: f64,
    pub nu_p_mode: NuPMode,
    pub residual_mode: ResidualMode,
    pub attention_factor_mode: AttentionFactorMode,
    pub global_scale_constant: f64,
    pub global_scale_all: f64,
}

impl NormFactorSet {
    pub fn unity() -> Self {
        NormFactorSet {
            nu_qkv: 1.0,
            nu_p: 1.0,
            nu_uz: 1.0,
            nu_acf: 1.0,
            nu_d: 1.0,
            nu_p_mode: NuPMode::Unity,
            residual_mode: ResidualMode::None,
            attention_factor_mode: AttentionFactorMode::Off,
            global_scale_constant: 1.0,
            global_scale_all: 1.0,
        }
    }

    /// Constant factors by name, in architecture order.
    pub fn constants(&self) -> [(&'static str, f64); 5] {
        [
            ("nu_qkv", self.nu_qkv),
            ("nu_p", self.nu_p),
            ("nu_uz", self.nu_uz),
            ("nu_acf", self.nu_acf),
            ("nu_d", self.nu_d),
        ]
    }

    /// Residual multiplier for one coordinate with interpolation weight α.
    pub fn residual_scale(&self, alpha: f64) -> f64 {
        let base = match self.residual_mode {
            ResidualMode::Lerp => lerp_factor(alpha),
            ResidualMode::Classic => classic_residual_factor(),
            ResidualMode::None => 1.0,
        };
        base * self.global_scale_all
    }
}

/// Resolves the factor set of a model. GPT+ gets [`NormFactorSet::unity`].
/// nGPT normalizes explicitly and also gets unity constants.
pub fn resolve_factors(cfg: &ModelConfig) -> NormFactorSet {
    if cfg.variant != Variant::Angpt {
        return NormFactorSet::unity();
    }
    let f = &cfg.factors;
    let (dm, dh, df) = (cfg.d_model, cfg.d_head(), cfg.d_mlp());
    let ratio = |a: usize, b: usize| (a as f64 / b as f64).sqrt();
    let mult = f.global_scale_constant * f.global_scale_all;
    let c = |v: f64| if f.constant_factors { v * mult } else { mult };
    let nu_p = match f.nu_p_mode {
        NuPMode::HeadInput => ratio(dh, dm),
        NuPMode::Unity => 1.0,
    };
    let residual_mode = match (f.residual_factor, cfg.use_lerp) {
        (false, _) => ResidualMode::None,
        (true, true) => ResidualMode::Lerp,
        (true, false) => ResidualMode::Classic,
    };
    NormFactorSet {
        nu_qkv: c(ratio(dm, dh)),
        nu_p: c(nu_p),
        nu_uz: c(ratio(dm, df)),
        nu_acf: c(f.nu_acf),
        nu_d: c(ratio(df, dm)),
        nu_p_mode: f.nu_p_mode,
        residual_mode,
        attention_factor_mode: f.attention_factor,
        global_scale_constant: f.global_scale_constant,
        global_scale_all: f.global_scale_all,
    }
}

/// Function of a sphere point whose output norm is probed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ConcentrationMap {
    /// Fixed row-normalized map with `round(out_ratio·d)` rows.
    LinearMap { out_ratio: f64 },
    /// `u ⊙ silu(z)` on two independent points.
    SiluGate,
    /// `‖x‖` itself.
    InputNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConcentrationRow {
    pub d: usize,
    pub mean_norm: f64,
    pub std_norm: f64,
    pub sample_count: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConcentrationReport {
    pub rows: Vec<ConcentrationRow>,
}

impl ConcentrationReport {
    /// Least-squares slope of `log std` against `log d`.
    pub fn log_log_slope(&self) -> Result<f64> {
        let pts: Vec<(f64, f64)> = self.rows.iter().map(|r| (r.d as f64, r.std_norm)).collect();
        crate::instrument::power_law_fit(&pts).map(|f| f.exponent)
    }
}

const MIN_CONCENTRATION_SAMPLES: usize = 1000;
const CHUNK: usize = 512;

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Norms `‖W x‖` for `samples` fresh sphere points, `W` row-major
/// `rows × cols`. Batched through f32 gemm, accumulated in f64.
fn linear_map_norms(w: &[f32], rows: usize, cols: usize, samples: usize, s: &mut SphereSampler) -> Vec<f64> {
    let mut out = Vec::with_capacity(samples);
    let mut x = vec![0.0f64; cols];
    let mut xs = vec![0.0f32; CHUNK * cols];
    let mut y = vec![0.0f32; CHUNK * rows];
    let mut done = 0;
    while done < samples {
        let n = CHUNK.min(samples - done);
        for i in 0..n {
            s.fill(&mut x);
            for (dst, src) in xs[i * cols..(i + 1) * cols].iter_mut().zip(&x) {
                *dst = *src as f32;
            }
        }
        gemm(
            &xs[..n * cols],
            Layout::row_major(n, cols),
            w,
            Layout::transposed(rows, cols),
            &mut y[..n * rows],
            false,
        );
        for r in y[..n * rows].chunks(rows) {
            out.push(r.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt());
        }
        done += n;
    }
    out
}

/// Norms `√(xᵀ G x)` for a symmetric `d × d` Gram matrix; cheaper than
/// applying a tall map directly.
fn gram_norms(g: &[f32], d: usize, samples: usize, s: &mut SphereSampler) -> Vec<f64> {
    let mut out = Vec::with_capacity(samples);
    let mut x = vec![0.0f64; d];
    let mut xs = vec![0.0f32; CHUNK * d];
    let mut y = vec![0.0f32; CHUNK * d];
    let mut done = 0;
    while done < samples {
        let n = CHUNK.min(samples - done);
        for i in 0..n {
            s.fill(&mut x);
            for (dst, src) in xs[i * d..(i + 1) * d].iter_mut().zip(&x) {
                *dst = *src as f32;
            }
        }
        gemm(&xs[..n * d], Layout::row_major(n, d), g, Layout::row_major(d, d), &mut y[..n * d], false);
        for i in 0..n {
            let q: f64 = xs[i * d..(i + 1) * d]
                .iter()
                .zip(&y[i * d..(i + 1) * d])
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum();
            out.push(q.max(0.0).sqrt());
        }
        done += n;
    }
    out
}

fn gram(w: &[f64], rows: usize, cols: usize) -> Vec<f32> {
    let w32: Vec<f32> = w.iter().map(|&v| v as f32).collect();
    let mut g = vec![0.0f32; cols * cols];
    gemm(
        &w32,
        Layout::transposed(rows, cols),
        &w32,
        Layout::row_major(rows, cols),
        &mut g,
        false,
    );
    g
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Mean and std of `‖g(x)‖` over sphere inputs for each dimension.
pub fn concentration_check(
    map: ConcentrationMap,
    dims: &[usize],
    samples: usize,
    seed: u64,
) -> Result<ConcentrationReport> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::invalid("concentration_check: dims must be nonempty and positive"));
    }
    if samples < MIN_CONCENTRATION_SAMPLES {
        return Err(Error::invalid(format!(
            "concentration_check: need at least {MIN_CONCENTRATION_SAMPLES} samples, got {samples}"
        )));
    }
    let mut rows = Vec::with_capacity(dims.len());
    for (i, &d) in dims.iter().enumerate() {
        let row_seed = seed.wrapping_add(i as u64);
        let mut s = SphereSampler::new(row_seed);
        let norms = match map {
            ConcentrationMap::InputNorm => {
                let mut x = vec![0.0; d];
                (0..samples)
                    .map(|_| {
                        s.fill(&mut x);
                        // The map is constant on the sphere by definition.
                        1.0
                    })
                    .collect()
            }
            ConcentrationMap::SiluGate => {
                let (mut u, mut z) = (vec![0.0; d], vec![0.0; d]);
                (0..samples)
                    .map(|_| {
                        s.fill(&mut u);
                        s.fill(&mut z);
                        u.iter()
                            .zip(&z)
                            .map(|(a, b)| (a * Activation::Silu.apply(*b)).powi(2))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .collect()
            }
            ConcentrationMap::LinearMap { out_ratio } => {
                if out_ratio <= 0.0 {
                    return Err(Error::invalid("concentration_check: out_ratio must be positive"));
                }
                let r = ((out_ratio * d as f64).round() as usize).max(1);
                let w = to_f32(&s.row_normalized(r, d));
                linear_map_norms(&w, r, d, samples, &mut s)
            }
        };
        let (mean, std) = mean_std(&norms);
        rows.push(ConcentrationRow {
            d,
            mean_norm: mean,
            std_norm: if matches!(map, ConcentrationMap::InputNorm) { 0.0 } else { std },
            sample_count: samples,
            seed: row_seed,
        });
    }
    Ok(ConcentrationReport { rows })
}

/// One row of [`estimation_error_report`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FactorError {
    pub name: String,
    pub d_model: usize,
    pub analytic: f64,
    pub empirical: f64,
    pub rel_error: f64,
    /// Whether the analytic value is expected to match the sphere model.
    /// The shipped SwiGLU constant is not derived from it.
    pub gated: bool,
}

fn factor_row(name: &str, d_model: usize, analytic: f64, mean_norm: f64, gated: bool) -> FactorError {
    let empirical = mean_norm.recip();
    FactorError {
        name: name.to_string(),
        d_model,
        analytic,
        empirical,
        rel_error: (analytic - empirical).abs() / empirical,
        gated,
    }
}

/// Alpha at which the interpolation factor is probed.
pub const PROBE_ALPHA: f64 = 0.05;

/// Compares each analytic factor to `1/mean‖g(x)‖` measured by pushing
/// sphere inputs through the matching primitive. Factors are taken as
/// configured (ablation multipliers included) from an anGPT-style set
/// built for `d_model` with 64-dim heads.
pub fn estimation_error_report(
    factors: &NormFactorSet,
    d_model: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<FactorError>> {
    if samples == 0 {
        return Err(Error::invalid("estimation_error_report: samples must be ≥ 1"));
    }
    let d_head = 64.min(d_model);
    let d_mlp = 4 * d_model;
    let mut s = SphereSampler::new(seed);
    let mut out = Vec::new();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;

    // v-part of the fused projection for one head; q and k are normalized
    // afterwards and carry no factor.
    let w = to_f32(&s.row_normalized(d_head, d_model));
    let n = linear_map_norms(&w, d_head, d_model, samples, &mut s);
    out.push(factor_row("nu_qkv", d_model, factors.nu_qkv, mean(&n), true));

    let n = if factors.nu_p_mode == NuPMode::Unity {
        let w = to_f32(&s.row_normalized(d_model, d_model));
        linear_map_norms(&w, d_model, d_model, samples, &mut s)
    } else {
        let w = to_f32(&s.row_normalized(d_model, d_head));
        linear_map_norms(&w, d_model, d_head, samples, &mut s)
    };
    out.push(factor_row("nu_p", d_model, factors.nu_p, mean(&n), true));

    let wu = s.row_normalized(d_mlp, d_model);
    let n = gram_norms(&gram(&wu, d_mlp, d_model), d_model, samples, &mut s);
    out.push(factor_row("nu_uz", d_model, factors.nu_uz, mean(&n), true));

    let acf = activation_factor_mc(Activation::Silu, d_mlp, samples, seed ^ 0xAC)?;
    out.push(FactorError {
        name: "nu_acf".into(),
        d_model,
        analytic: factors.nu_acf,
        empirical: acf,
        rel_error: (factors.nu_acf - acf).abs() / acf,
        gated: false,
    });

    let wd = to_f32(&s.row_normalized(d_model, d_mlp));
    let n = linear_map_norms(&wd, d_model, d_mlp, samples, &mut s);
    out.push(factor_row("nu_d", d_model, factors.nu_d, mean(&n), true));

    let (mut h, mut x) = (vec![0.0; d_model], vec![0.0; d_model]);
    let (mut lerp, mut classic) = (0.0, 0.0);
    for _ in 0..samples {
        s.fill(&mut h);
        s.fill(&mut x);
        let (mut a, mut b) = (0.0, 0.0);
        for (hi, xi) in h.iter().zip(&x) {
            a += (hi + PROBE_ALPHA * (xi - hi)).powi(2);
            b += (hi + xi).powi(2);
        }
        lerp += a.sqrt();
        classic += b.sqrt();
    }
    let k = samples as f64;
    out.push(factor_row("nu_lerp(0.05)", d_model, lerp_factor(PROBE_ALPHA), lerp / k, true));
    out.push(factor_row("nu_classic", d_model, classic_residual_factor(), classic / k, true));

    let id = activation_factor_mc(Activation::Identity, d_model, samples, seed ^ 0x1D)?;
    let sq = (d_model as f64).sqrt();
    out.push(FactorError {
        name: "nu_identity_act".into(),
        d_model,
        analytic: sq,
        empirical: id,
        rel_error: (sq - id).abs() / id,
        gated: true,
    });
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResidualGrowthRow {
    pub l: usize,
    /// Mean norm of the sum of `l` independent unit vectors.
    pub additive: f64,
    /// Mean norm of `l` interpolation steps rescaled by ν(α).
    pub lerp: f64,
}

/// Accumulates `L` independent unit contributions two ways: plain sums and
/// the ν-corrected interpolation chain starting from a unit vector.
pub fn residual_growth_demo(
    layers: usize,
    d: usize,
    samples: usize,
    seed: u64,
    alpha: f64,
) -> Result<Vec<ResidualGrowthRow>> {
    if layers == 0 || d == 0 || samples == 0 {
        return Err(Error::invalid("residual_growth_demo: L, d and samples must be ≥ 1"));
    }
    let mut s = SphereSampler::new(seed);
    let nu = lerp_factor(alpha);
    let mut add = vec![0.0; layers];
    let mut lerp = vec![0.0; layers];
    let (mut acc, mut h, mut x) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for _ in 0..samples {
        acc.iter_mut().for_each(|v| *v = 0.0);
        s.fill(&mut h);
        for l in 0..layers {
            s.fill(&mut x);
            let mut na = 0.0;
            let mut nl = 0.0;
            for i in 0..d {
                acc[i] += x[i];
                na += acc[i] * acc[i];
                h[i] = (h[i] + alpha * (x[i] - h[i])) * nu;
                nl += h[i] * h[i];
            }
            add[l] += na.sqrt();
            lerp[l] += nl.sqrt();
        }
    }
    let k = samples as f64;
    Ok((0..layers)
        .map(|l| ResidualGrowthRow {
            l: l + 1,
            additive: add[l] / k,
            lerp: lerp[l] / k,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContractionReport {
    pub alpha_star: f64,
    pub rho_max: f64,
    pub kappa: f64,
    /// `iterates[t][i]` is coordinate `i` after `t` steps of plain GD.
    pub iterates: Vec<Vec<f64>>,
    pub iterate_norms: Vec<f64>,
    /// Same with the preconditioned problem (all eigenvalues 1), α = 1.
    pub preconditioned_norms: Vec<f64>,
    /// Per-coordinate contraction `|1 − α*·λ_i|`.
    pub contraction: Vec<f64>,
}

/// Gradient descent on `½ xᵀ diag(λ) x` from `x₀ = 1`.
pub fn contraction_demo(lambdas: &[f64], steps: usize) -> Result<ContractionReport> {
    if lambdas.is_empty() || lambdas.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(Error::invalid("contraction_demo: eigenvalues must be positive"));
    }
    let max = lambdas.iter().cloned().fold(f64::MIN, f64::max);
    let min = lambdas.iter().cloned().fold(f64::MAX, f64::min);
    let kappa = max / min;
    let alpha_star = 2.0 / (max + min);
    let rho_max = (kappa - 1.0) / (kappa + 1.0);
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();

    let mut x = vec![1.0; lambdas.len()];
    let mut iterates = vec![x.clone()];
    for _ in 0..steps {
        for (xi, li) in x.iter_mut().zip(lambdas) {
            *xi -= alpha_star * li * *xi;
        }
        iterates.push(x.clone());
    }
    let iterate_norms = iterates.iter().map(|v| norm(v)).collect();

    // Column normalization turns Λ into I, so one step of α = 1 lands on 0.
    let mut p = vec![1.0; lambdas.len()];
    let mut preconditioned_norms = vec![norm(&p)];
    for _ in 0..steps {
        p.iter_mut().for_each(|v| *v -= *v);
        preconditioned_norms.push(norm(&p));
    }
    Ok(ContractionReport {
        alpha_star,
        rho_max,
        kappa,
        iterates,
        iterate_norms,
        preconditioned_norms,
        contraction: lambdas.iter().map(|l| (1.0 - alpha_star * l).abs()).collect(),
    })
}
