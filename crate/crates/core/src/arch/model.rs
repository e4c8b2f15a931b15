use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::config::{AttentionFactorMode, ModelConfig, Variant};
use super::params::{param_specs, Constraint, LayerIndex, ModelIndex, ParamSpec, Role};
use crate::error::{Error, Result};
use crate::ndmath::{Real, Tape, Tensor, Var};
use crate::normfactor::{attention_factor, resolve_factors, AttentionKind, NormFactorSet, ResidualMode};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub spec: ParamSpec,
    pub value: Tensor<T>,
}

/// A full model: embedding, `n_layers` blocks and the head.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    factors: NormFactorSet,
    params: Vec<Param<T>>,
    index: ModelIndex,
}

/// Per-layer norms of the residual stream, averaged over tokens.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerTrace {
    pub block_in: f64,
    pub block_in_min: f64,
    pub block_in_max: f64,
    pub post_attn: f64,
    pub post_mlp: f64,
    /// Extremes of the per-token norms after this layer's two residual
    /// updates.
    pub update_min: f64,
    pub update_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockTrace {
    pub layers: Vec<LayerTrace>,
    /// Per-token norms of the stream entering the head.
    pub final_norms: Vec<f64>,
}

pub struct Forward {
    /// `[batch, seq, vocab]`.
    pub logits: Var,
    /// One tape variable per model parameter, in parameter order.
    pub params: Vec<Var>,
    pub trace: Option<BlockTrace>,
}

/// Per-token L2 norms over the last axis.
pub fn token_norms<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.rows()
        .map(|r| r.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt())
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Normalizes every slice of `data` along the constraint axis of a
/// `[rows, cols]` matrix. Zero slices are left untouched.
pub(crate) fn normalize_axis<T: Real>(data: &mut [T], rows: usize, cols: usize, c: Constraint, bound_only: bool) -> bool {
    let mut all_nonzero = true;
    let mut fix = |n2: f64| -> Option<f64> {
        let n = n2.sqrt();
        if n == 0.0 {
            all_nonzero = false;
            None
        } else if bound_only && n <= 1.0 {
            None
        } else {
            Some(1.0 / n)
        }
    };
    match c {
        Constraint::Rows => {
            for r in data.chunks_mut(cols) {
                let n2: f64 = r.iter().map(|v| v.f64() * v.f64()).sum();
                if let Some(s) = fix(n2) {
                    let s = T::of(s);
                    r.iter_mut().for_each(|v| *v = *v * s);
                }
            }
        }
        Constraint::Columns => {
            let mut n2 = vec![0.0f64; cols];
            for r in data.chunks(cols) {
                for (a, v) in n2.iter_mut().zip(r) {
                    *a += v.f64() * v.f64();
                }
            }
            let scale: Vec<Option<T>> = n2.into_iter().map(|x| fix(x).map(T::of)).collect();
            for r in data.chunks_mut(cols) {
                for (v, s) in r.iter_mut().zip(&scale) {
                    if let Some(s) = s {
                        *v = *v * *s;
                    }
                }
            }
            let _ = rows;
        }
    }
    all_nonzero
}

/// Norms of each constrained slice of a `[rows, cols]` matrix.
pub fn constraint_norms<T: Real>(t: &Tensor<T>, c: Constraint) -> Vec<f64> {
    let cols = t.last_dim();
    match c {
        Constraint::Rows => token_norms(t),
        Constraint::Columns => {
            let mut n2 = vec![0.0f64; cols];
            for r in t.data().chunks(cols) {
                for (a, v) in n2.iter_mut().zip(r) {
                    *a += v.f64() * v.f64();
                }
            }
            n2.into_iter().map(f64::sqrt).collect()
        }
    }
}

/// How queries and keys are compared inside attention.
pub(crate) enum QkMode {
    /// No normalization, fixed multiplier.
    Raw(f64),
    /// Normalized per head, then scaled by a per-head vector `[H]`.
    PerHead(Var),
    /// Normalized per head, scaled per channel by `s [d]`, then by a
    /// constant.
    PerChannel(Var, f64),
}

pub(crate) struct AttnArgs<'a> {
    pub w_qkv: Var,
    pub w_p: Var,
    pub qkv_scale: f64,
    pub out_scale: f64,
    pub qk: QkMode,
    /// Row multipliers of the attention matrix, length `seq`.
    pub rows: Option<&'a [f64]>,
}

pub(crate) struct MlpArgs {
    pub w_uz: Var,
    pub w_d: Var,
    pub uz_scale: f64,
    pub act_scale: f64,
    pub out_scale: f64,
    /// nGPT: `(s_u, s_z, extra z multiplier)`.
    pub gate_scales: Option<(Var, Var, f64)>,
}

#[derive(Clone, Copy)]
pub(crate) struct Dims {
    pub batch: usize,
    pub seq: usize,
    pub d: usize,
    pub heads: usize,
    pub dk: usize,
    pub f: usize,
    pub rot_fraction: f64,
    pub rot_base: f64,
}

impl Dims {
    pub fn new(cfg: &ModelConfig, batch: usize, seq: usize) -> Self {
        Dims {
            batch,
            seq,
            d: cfg.d_model,
            heads: cfg.n_heads,
            dk: cfg.d_head(),
            f: cfg.d_mlp(),
            rot_fraction: cfg.rotary_fraction,
            rot_base: cfg.rotary_base,
        }
    }
}

fn maybe_scale<T: Real>(tape: &mut Tape<T>, x: Var, c: f64) -> Var {
    if c == 1.0 {
        x
    } else {
        tape.scale(x, c)
    }
}

/// `W_p(Av)` for input `x [B,S,d]`.
pub(crate) fn attention<T: Real>(tape: &mut Tape<T>, x: Var, a: &AttnArgs<'_>, dm: Dims) -> Result<Var> {
    let Dims { batch: b, seq: s, d, heads: h, dk, .. } = dm;
    let qkv = tape.linear(x, a.w_qkv)?;
    let qkv = maybe_scale(tape, qkv, a.qkv_scale);
    let positions: Vec<usize> = (0..s).collect();
    let mut parts = Vec::with_capacity(3);
    for i in 0..3 {
        let p = tape.slice_last(qkv, i * d, d)?;
        parts.push(tape.reshape(p, &[b, s, h, dk])?);
    }
    let (mut q, mut k, v) = (parts[0], parts[1], parts[2]);
    if dm.rot_fraction > 0.0 {
        q = tape.rotary(q, &positions, dm.rot_fraction, dm.rot_base)?;
        k = tape.rotary(k, &positions, dm.rot_fraction, dm.rot_base)?;
    }
    match &a.qk {
        QkMode::Raw(_) => {}
        QkMode::PerHead(_) => {
            q = tape.l2_normalize(q, 3)?;
            k = tape.l2_normalize(k, 3)?;
        }
        QkMode::PerChannel(sc, _) => {
            for t in [&mut q, &mut k] {
                let n = tape.l2_normalize(*t, 3)?;
                let flat = tape.reshape(n, &[b, s, d])?;
                let scaled = tape.mul_along(flat, *sc, 2)?;
                *t = tape.reshape(scaled, &[b, s, h, dk])?;
            }
        }
    }
    let heads = |tape: &mut Tape<T>, t: Var| -> Result<Var> {
        let p = tape.permute_0213(t)?;
        tape.reshape(p, &[b * h, s, dk])
    };
    let (qh, kh, vh) = (heads(tape, q)?, heads(tape, k)?, heads(tape, v)?);
    let mut scores = tape.bmm(qh, kh, true)?;
    match &a.qk {
        QkMode::Raw(c) | QkMode::PerChannel(_, c) => scores = tape.scale(scores, *c),
        QkMode::PerHead(g) => {
            let r = tape.reshape(scores, &[b, h, s * s])?;
            let r = tape.mul_along(r, *g, 1)?;
            scores = tape.reshape(r, &[b * h, s, s])?;
        }
    }
    let mut att = tape.softmax_rows(scores, true)?;
    if let Some(rows) = a.rows {
        let rv = tape.constant(Tensor::new(vec![s], rows.iter().map(|&r| T::of(r)).collect())?);
        att = tape.mul_along(att, rv, 1)?;
    }
    let o = tape.bmm(att, vh, false)?;
    let o = tape.reshape(o, &[b, h, s, dk])?;
    let o = tape.permute_0213(o)?;
    let o = tape.reshape(o, &[b, s, d])?;
    let y = tape.linear(o, a.w_p)?;
    Ok(maybe_scale(tape, y, a.out_scale))
}

/// `W_d(u ⊙ silu(z))` for input `x [B,S,d]`.
pub(crate) fn mlp<T: Real>(tape: &mut Tape<T>, x: Var, a: &MlpArgs, dm: Dims) -> Result<Var> {
    let uz = tape.linear(x, a.w_uz)?;
    let uz = maybe_scale(tape, uz, a.uz_scale);
    let mut u = tape.slice_last(uz, 0, dm.f)?;
    let mut z = tape.slice_last(uz, dm.f, dm.f)?;
    if let Some((su, sz, zmul)) = a.gate_scales {
        u = tape.mul_along(u, su, 2)?;
        z = tape.mul_along(z, sz, 2)?;
        z = maybe_scale(tape, z, zmul);
    }
    let act = tape.silu(z);
    let m = tape.mul(u, act)?;
    let m = maybe_scale(tape, m, a.act_scale);
    let y = tape.linear(m, a.w_d)?;
    Ok(maybe_scale(tape, y, a.out_scale))
}

fn init_value<T: Real>(spec: &ParamSpec, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = spec.numel();
    match spec.role {
        Role::Gain => Tensor::ones(spec.shape.clone()),
        Role::Scalar { s_scale, .. } => Tensor::full(spec.shape.clone(), T::of(s_scale)),
        Role::Matrix { constraint } => {
            let std = match cfg.variant {
                Variant::GptPlus if spec.name.ends_with("w_p") || spec.name.ends_with("w_d") => {
                    0.02 / (2.0 * cfg.n_layers as f64).sqrt()
                }
                Variant::GptPlus => 0.02,
                _ => 1.0,
            };
            let mut data: Vec<T> = (0..n)
                .map(|_| {
                    let g: f64 = StandardNormal.sample(rng);
                    T::of(g * std)
                })
                .collect();
            if let Some(c) = constraint {
                normalize_axis(&mut data, spec.shape[0], spec.shape[1], c, false);
            }
            Tensor::new(spec.shape.clone(), data).expect("spec shape matches data")
        }
    }
}

impl<T: Real> Model<T> {
    /// Allocates and initializes every parameter from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let config = config.materialized();
        let (specs, index) = param_specs(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = specs
            .into_iter()
            .map(|spec| {
                let value = init_value(&spec, &config, &mut rng);
                Param { spec, value }
            })
            .collect();
        Ok(Model {
            factors: resolve_factors(&config),
            config,
            params,
            index,
        })
    }

    /// Reassembles a model from named tensors, checking names and shapes
    /// against the configuration.
    pub fn from_named(config: &ModelConfig, mut named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let config = config.materialized();
        let (specs, index) = param_specs(&config);
        let mut params = Vec::with_capacity(specs.len());
        for spec in specs {
            let pos = named
                .iter()
                .position(|(n, _)| *n == spec.name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{}`", spec.name)))?;
            let (_, value) = named.swap_remove(pos);
            if value.shape() != spec.shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    spec.name,
                    value.shape(),
                    spec.shape
                )));
            }
            params.push(Param { spec, value });
        }
        if let Some((n, _)) = named.first() {
            return Err(Error::Format(format!("unexpected parameter `{n}`")));
        }
        Ok(Model {
            factors: resolve_factors(&config),
            config,
            params,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn factors(&self) -> &NormFactorSet {
        &self.factors
    }

    pub fn index(&self) -> &ModelIndex {
        &self.index
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.spec.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.spec.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Effective values of a reparameterized scalar parameter.
    pub fn effective(&self, i: usize) -> Vec<f64> {
        let p = &self.params[i];
        let k = p.spec.role.read_scale();
        p.value.data().iter().map(|v| v.f64() * k).collect()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            factors: self.factors.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    spec: p.spec.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub(crate) fn check_tokens(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<()> {
        if batch == 0 || seq == 0 || tokens.len() != batch * seq {
            return Err(Error::shape(
                "forward",
                format!("{} tokens for batch {batch} × seq {seq}", tokens.len()),
            ));
        }
        if seq > self.config.context_len {
            return Err(Error::invalid(format!(
                "sequence length {seq} exceeds context_len {}",
                self.config.context_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} outside vocab {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Runs the model on `tokens` (`batch × seq`, row-major). With
    /// `grad`, parameters enter the tape as differentiable leaves.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        tokens: &[usize],
        batch: usize,
        seq: usize,
        grad: bool,
        trace: bool,
    ) -> Result<Forward> {
        self.check_tokens(tokens, batch, seq)?;
        let pv: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if grad {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        let read = |tape: &mut Tape<T>, i: usize| {
            let k = self.params[i].spec.role.read_scale();
            maybe_scale(tape, pv[i], k)
        };
        let cfg = &self.config;
        let dm = Dims::new(cfg, batch, seq);
        let fs = &self.factors;
        let row_factors = match (cfg.variant, fs.attention_factor_mode) {
            (Variant::Angpt, AttentionFactorMode::Dense) => {
                Some(vec![attention_factor(AttentionKind::Dense, seq)?.row(0); seq])
            }
            (Variant::Angpt, AttentionFactorMode::Causal) => {
                let s = attention_factor(AttentionKind::Causal, seq)?;
                Some((0..seq).map(|r| s.row(r)).collect::<Vec<_>>())
            }
            _ => None,
        };
        let mut traces = Vec::new();
        let mut h = tape.gather_rows(pv[self.index.embed], tokens, &[batch, seq])?;

        for li in &self.index.layers {
            let block_in = trace.then(|| token_norms(tape.value(h)));
            let LayerIndex { w_qkv, w_p, w_uz, w_d, .. } = *li;
            let qk = match cfg.variant {
                Variant::GptPlus if !cfg.qk_norm => QkMode::Raw(1.0 / (dm.dk as f64).sqrt()),
                Variant::GptPlus | Variant::Angpt => QkMode::PerHead(read(tape, li.g.expect("g"))),
                Variant::Ngpt => QkMode::PerChannel(read(tape, li.s_qk.expect("s_qk")), (dm.dk as f64).sqrt()),
            };
            let attn = AttnArgs {
                w_qkv: pv[w_qkv],
                w_p: pv[w_p],
                qkv_scale: fs.nu_qkv,
                out_scale: fs.nu_p,
                qk,
                rows: row_factors.as_deref(),
            };
            let x = match li.attn_gamma {
                Some(g) => tape.rms_scale(h, pv[g])?,
                None => h,
            };
            let y = attention(tape, x, &attn, dm)?;
            h = self.residual(tape, h, y, li.alpha_attn, &read)?;
            let post_attn = trace.then(|| token_norms(tape.value(h)));

            let gate_scales = match (li.s_u, li.s_z) {
                (Some(su), Some(sz)) => Some((read(tape, su), read(tape, sz), (dm.d as f64).sqrt())),
                _ => None,
            };
            let m = MlpArgs {
                w_uz: pv[w_uz],
                w_d: pv[w_d],
                uz_scale: fs.nu_uz,
                act_scale: fs.nu_acf,
                out_scale: fs.nu_d,
                gate_scales,
            };
            let x = match li.mlp_gamma {
                Some(g) => tape.rms_scale(h, pv[g])?,
                None => h,
            };
            let y = mlp(tape, x, &m, dm)?;
            h = self.residual(tape, h, y, li.alpha_mlp, &read)?;
            if let (Some(bi), Some(pa)) = (block_in, post_attn) {
                let pm = token_norms(tape.value(h));
                let both = || pa.iter().chain(&pm).cloned();
                traces.push(LayerTrace {
                    block_in: mean(&bi),
                    block_in_min: bi.iter().cloned().fold(f64::INFINITY, f64::min),
                    block_in_max: bi.iter().cloned().fold(0.0, f64::max),
                    post_attn: mean(&pa),
                    post_mlp: mean(&pm),
                    update_min: both().fold(f64::INFINITY, f64::min),
                    update_max: both().fold(0.0, f64::max),
                });
            }
        }
        let final_norms = trace.then(|| token_norms(tape.value(h)));
        let x = match self.index.head_gamma {
            Some(g) => tape.rms_scale(h, pv[g])?,
            None => h,
        };
        let mut logits = tape.linear(x, pv[self.index.head_w])?;
        if let Some(s) = self.index.logit_scale {
            let sz = read(tape, s);
            logits = tape.mul_along(logits, sz, 2)?;
        }
        Ok(Forward {
            logits,
            params: pv,
            trace: final_norms.map(|final_norms| BlockTrace {
                layers: traces,
                final_norms,
            }),
        })
    }

    fn residual(
        &self,
        tape: &mut Tape<T>,
        h: Var,
        y: Var,
        alpha: Option<usize>,
        read: &dyn Fn(&mut Tape<T>, usize) -> Var,
    ) -> Result<Var> {
        match self.config.variant {
            Variant::GptPlus => tape.add(h, y),
            Variant::Ngpt => {
                let ya = tape.l2_normalize(y, 2)?;
                let a = read(tape, alpha.expect("alpha"));
                let diff = tape.sub(ya, h)?;
                let step = tape.mul_along(diff, a, 2)?;
                let sum = tape.add(h, step)?;
                tape.l2_normalize(sum, 2)
            }
            Variant::Angpt => {
                let ya = tape.l2_normalize(y, 2)?;
                let fs = &self.factors;
                let gsa = fs.global_scale_all;
                if !self.config.use_lerp {
                    let sum = tape.add(h, ya)?;
                    return Ok(maybe_scale(tape, sum, fs.residual_scale(0.0)));
                }
                let a = read(tape, alpha.expect("alpha"));
                let diff = tape.sub(ya, h)?;
                let step = tape.mul_along(diff, a, 2)?;
                let mixed = tape.add(h, step)?;
                match fs.residual_mode {
                    ResidualMode::Lerp => {
                        let nu = tape.lerp_factor(a);
                        let nu = maybe_scale(tape, nu, gsa);
                        tape.mul_along(mixed, nu, 2)
                    }
                    _ => Ok(maybe_scale(tape, mixed, gsa)),
                }
            }
        }
    }

    /// Logits without building gradients.
    pub fn logits(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, tokens, batch, seq, false, false)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Forward pass returning only the trace.
    pub fn trace(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<BlockTrace> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, tokens, batch, seq, false, true)?;
        Ok(out.trace.expect("trace requested"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_axis_columns() {
        let mut d = vec![3.0f64, 0.0, 4.0, 2.0];
        normalize_axis(&mut d, 2, 2, Constraint::Columns, false);
        assert!(d.iter().zip([0.6, 0.0, 0.8, 1.0]).all(|(a, b)| (a - b).abs() < 1e-15), "{d:?}");
        let mut d = vec![0.3f64, 0.4, 3.0, 4.0];
        normalize_axis(&mut d, 2, 2, Constraint::Rows, true);
        assert!(d.iter().zip([0.3, 0.4, 0.6, 0.8]).all(|(a, b)| (a - b).abs() < 1e-15), "{d:?}");
    }

    #[test]
    fn init_respects_constraints() {
        for v in [Variant::Ngpt, Variant::Angpt] {
            let m = Model::<f64>::build(&ModelConfig::smoke(v), 3).unwrap();
            for p in m.params() {
                if let Some(c) = p.spec.role.constraint() {
                    for n in constraint_norms(&p.value, c) {
                        assert!((n - 1.0).abs() < 1e-12, "{}", p.spec.name);
                    }
                }
            }
        }
    }

    #[test]
    fn scalars_start_at_s_init() {
        let m = Model::<f64>::build(&ModelConfig::smoke(Variant::Angpt), 1).unwrap();
        let idx = m.index();
        for a in m.effective(idx.layers[0].alpha_attn.unwrap()) {
            assert!((a - 0.05).abs() < 1e-15);
        }
        for s in m.effective(idx.logit_scale.unwrap()) {
            assert!((s - 0.01).abs() < 1e-15);
        }
        for g in m.effective(idx.layers[1].g.unwrap()) {
            assert!((g - 8.0).abs() < 1e-12);
        }
    }
}
