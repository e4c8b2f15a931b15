use super::config::{AttentionFactorMode, ModelConfig, Variant};
use super::model::{attention, mlp, AttnArgs, Dims, MlpArgs, Model, QkMode};
use crate::error::{Error, Result};
use crate::ndmath::{Real, Tape, Tensor};
use crate::normfactor::{attention_factor, AttentionKind, ResidualMode};

/// One anGPT block with every constant folded in.
#[derive(Clone, Debug)]
pub struct InferenceLayer<T> {
    pub w_qkv: Tensor<T>,
    pub w_p: Tensor<T>,
    pub w_uz: Tensor<T>,
    pub w_d: Tensor<T>,
    pub g: Tensor<T>,
    /// `h ← h⊙keep + norm(y)⊙mix` for the attention and MLP residuals.
    pub attn_keep: Tensor<T>,
    pub attn_mix: Tensor<T>,
    pub mlp_keep: Tensor<T>,
    pub mlp_mix: Tensor<T>,
}

/// anGPT with the constant factors and `s_Z` subsumed into weights.
#[derive(Clone, Debug)]
pub struct InferenceModel<T> {
    pub config: ModelConfig,
    pub embed: Tensor<T>,
    pub layers: Vec<InferenceLayer<T>>,
    pub head: Tensor<T>,
}

fn scaled<T: Real>(t: &Tensor<T>, c: f64) -> Tensor<T> {
    let c = T::of(c);
    t.map(|v| v * c)
}

fn vector<T: Real>(v: Vec<f64>) -> Tensor<T> {
    let n = v.len();
    Tensor::new(vec![n], v.into_iter().map(T::of).collect()).expect("nonempty")
}

impl<T: Real> Model<T> {
    /// Folds the constant factors into the adjacent maps:
    /// ν_qkv into `W_qkv`, ν_p into `W_p`, ν_uz and ν_acf into `W_uz`
    /// (ν_acf on the `u` half only), ν_d into `W_d` and `s_Z` into the rows
    /// of `W_h`. The learned residual weights become two fixed vectors per
    /// residual.
    pub fn subsume_factors(&self) -> Result<InferenceModel<T>> {
        let cfg = self.config();
        if cfg.variant != Variant::Angpt {
            return Err(Error::invalid(format!(
                "subsume_factors needs an angpt model, got {}",
                cfg.variant
            )));
        }
        let fs = self.factors();
        let p = self.params();
        let idx = self.index();
        let f = cfg.d_mlp();
        let residual = |alpha: Vec<f64>| -> (Tensor<T>, Tensor<T>) {
            let (keep, mix): (Vec<f64>, Vec<f64>) = alpha
                .iter()
                .map(|&a| {
                    if !cfg.use_lerp {
                        let s = fs.residual_scale(0.0);
                        return (s, s);
                    }
                    let nu = match fs.residual_mode {
                        ResidualMode::Lerp => fs.residual_scale(a),
                        _ => fs.global_scale_all,
                    };
                    ((1.0 - a) * nu, a * nu)
                })
                .unzip();
            (vector(keep), vector(mix))
        };
        let mut layers = Vec::with_capacity(idx.layers.len());
        for li in &idx.layers {
            let mut w_uz = scaled(&p[li.w_uz].value, fs.nu_uz);
            let cols = cfg.d_model;
            let acf = T::of(fs.nu_acf);
            w_uz.data_mut()[..f * cols].iter_mut().for_each(|v| *v = *v * acf);
            let (attn_keep, attn_mix) = residual(self.effective(li.alpha_attn.expect("alpha")));
            let (mlp_keep, mlp_mix) = residual(self.effective(li.alpha_mlp.expect("alpha")));
            layers.push(InferenceLayer {
                w_qkv: scaled(&p[li.w_qkv].value, fs.nu_qkv),
                w_p: scaled(&p[li.w_p].value, fs.nu_p),
                w_uz,
                w_d: scaled(&p[li.w_d].value, fs.nu_d),
                g: vector(self.effective(li.g.expect("g"))),
                attn_keep,
                attn_mix,
                mlp_keep,
                mlp_mix,
            });
        }
        let sz = self.effective(idx.logit_scale.expect("s_z"));
        let mut head = p[idx.head_w].value.clone();
        let d = cfg.d_model;
        for (row, s) in head.data_mut().chunks_mut(d).zip(&sz) {
            let s = T::of(*s);
            row.iter_mut().for_each(|v| *v = *v * s);
        }
        Ok(InferenceModel {
            config: cfg.clone(),
            embed: p[idx.embed].value.clone(),
            layers,
            head,
        })
    }
}

impl<T: Real> InferenceModel<T> {
    pub fn logits(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<Tensor<T>> {
        let cfg = &self.config;
        if tokens.len() != batch * seq || seq > cfg.context_len {
            return Err(Error::shape("inference", "token count or length"));
        }
        if tokens.iter().any(|&t| t >= cfg.vocab_size) {
            return Err(Error::invalid("token id outside vocab"));
        }
        let mut tape = Tape::<T>::new();
        let dm = Dims::new(cfg, batch, seq);
        let rows: Option<Vec<f64>> = match cfg.factors.attention_factor {
            AttentionFactorMode::Off => None,
            AttentionFactorMode::Dense => {
                Some(vec![attention_factor(AttentionKind::Dense, seq)?.row(0); seq])
            }
            AttentionFactorMode::Causal => {
                let s = attention_factor(AttentionKind::Causal, seq)?;
                Some((0..seq).map(|r| s.row(r)).collect())
            }
        };
        let embed = tape.constant(self.embed.clone());
        let mut h = tape.gather_rows(embed, tokens, &[batch, seq])?;
        for l in &self.layers {
            let g = tape.constant(l.g.clone());
            let a = AttnArgs {
                w_qkv: tape.constant(l.w_qkv.clone()),
                w_p: tape.constant(l.w_p.clone()),
                qkv_scale: 1.0,
                out_scale: 1.0,
                qk: QkMode::PerHead(g),
                rows: rows.as_deref(),
            };
            let y = attention(&mut tape, h, &a, dm)?;
            h = mix(&mut tape, h, y, &l.attn_keep, &l.attn_mix)?;
            let m = MlpArgs {
                w_uz: tape.constant(l.w_uz.clone()),
                w_d: tape.constant(l.w_d.clone()),
                uz_scale: 1.0,
                act_scale: 1.0,
                out_scale: 1.0,
                gate_scales: None,
            };
            let y = mlp(&mut tape, h, &m, dm)?;
            h = mix(&mut tape, h, y, &l.mlp_keep, &l.mlp_mix)?;
        }
        let head = tape.constant(self.head.clone());
        let logits = tape.linear(h, head)?;
        Ok(tape.value(logits).clone())
    }
}

fn mix<T: Real>(
    tape: &mut Tape<T>,
    h: crate::ndmath::Var,
    y: crate::ndmath::Var,
    keep: &Tensor<T>,
    mixw: &Tensor<T>,
) -> Result<crate::ndmath::Var> {
    let ya = tape.l2_normalize(y, 2)?;
    let k = tape.constant(keep.clone());
    let m = tape.constant(mixw.clone());
    let a = tape.mul_along(h, k, 2)?;
    let b = tape.mul_along(ya, m, 2)?;
    tape.add(a, b)
}
