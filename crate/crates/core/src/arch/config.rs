use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which column of the architecture table a model follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    GptPlus,
    Ngpt,
    Angpt,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::GptPlus, Variant::Ngpt, Variant::Angpt];

    pub fn name(self) -> &'static str {
        match self {
            Variant::GptPlus => "gpt_plus",
            Variant::Ngpt => "ngpt",
            Variant::Angpt => "angpt",
        }
    }

    /// nGPT and anGPT keep the residual stream on (or near) the unit sphere.
    pub fn is_normalized(self) -> bool {
        !matches!(self, Variant::GptPlus)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gpt_plus" | "gpt+" => Ok(Variant::GptPlus),
            "ngpt" => Ok(Variant::Ngpt),
            "angpt" => Ok(Variant::Angpt),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// Convention for the output-projection factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NuPMode {
    /// `√(d_head/d_model)`: the head dimension is treated as the input side.
    #[default]
    HeadInput,
    /// `1`: the projection is treated as a square map.
    Unity,
}

/// Optional rescaling of attention-matrix rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionFactorMode {
    #[default]
    Off,
    Dense,
    Causal,
}

/// Normalization-factor policy and ablation switches (anGPT only).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FactorConfig {
    pub nu_p_mode: NuPMode,
    pub nu_acf: f64,
    pub attention_factor: AttentionFactorMode,
    /// `false` replaces every constant factor by 1.
    pub constant_factors: bool,
    /// `false` drops the residual factor (ν(α) or 1/√2).
    pub residual_factor: bool,
    /// Multiplies the constant factors only.
    pub global_scale_constant: f64,
    /// Multiplies the constant factors and the residual factor.
    pub global_scale_all: f64,
}

/// Shipped SwiGLU factor.
pub const NU_ACF_DEFAULT: f64 = 3.74;

impl Default for FactorConfig {
    fn default() -> Self {
        FactorConfig {
            nu_p_mode: NuPMode::HeadInput,
            nu_acf: NU_ACF_DEFAULT,
            attention_factor: AttentionFactorMode::Off,
            constant_factors: true,
            residual_factor: true,
            global_scale_constant: 1.0,
            global_scale_all: 1.0,
        }
    }
}

fn default_rotary_fraction() -> f64 {
    0.5
}
fn default_rotary_base() -> f64 {
    10000.0
}
fn default_alpha_init() -> f64 {
    0.05
}
fn default_true() -> bool {
    true
}

/// Architecture hyperparameters.
///
/// `d_head = d_model / n_heads` and `d_mlp = 4·d_model` are derived.
/// `s_init` and `s_scale` default per variant when absent; see
/// [`ModelConfig::materialized`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    #[serde(default = "default_rotary_fraction")]
    pub rotary_fraction: f64,
    #[serde(default = "default_rotary_base")]
    pub rotary_base: f64,
    /// Initial value of the logit scale `s_Z`.
    #[serde(default)]
    pub s_init: Option<f64>,
    /// Stored-magnitude scale shared by all reparameterized scalars.
    #[serde(default)]
    pub s_scale: Option<f64>,
    #[serde(default = "default_alpha_init")]
    pub alpha_init: f64,
    /// GPT+ only: QK normalization with a learnable per-head scale.
    #[serde(default = "default_true")]
    pub qk_norm: bool,
    /// anGPT only: `false` swaps the interpolation for `(h + h_a)/√2`.
    #[serde(default = "default_true")]
    pub use_lerp: bool,
    #[serde(default)]
    pub factors: FactorConfig,
}

/// Sizes of the published preset table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PresetSize {
    M32,
    M62,
    M125,
    M250,
    B05,
    B1,
}

impl PresetSize {
    pub const ALL: [PresetSize; 6] = [
        PresetSize::M32,
        PresetSize::M62,
        PresetSize::M125,
        PresetSize::M250,
        PresetSize::B05,
        PresetSize::B1,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PresetSize::M32 => "32m",
            PresetSize::M62 => "62m",
            PresetSize::M125 => "125m",
            PresetSize::M250 => "250m",
            PresetSize::B05 => "0.5b",
            PresetSize::B1 => "1b",
        }
    }

    /// `(d_model, n_layers, n_heads)`.
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            PresetSize::M32 => (256, 6, 4),
            PresetSize::M62 => (384, 10, 6),
            PresetSize::M125 => (512, 18, 8),
            PresetSize::M250 => (768, 18, 12),
            PresetSize::B05 => (1024, 24, 16),
            PresetSize::B1 => (1280, 36, 20),
        }
    }
}

impl std::str::FromStr for PresetSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PresetSize::ALL
            .into_iter()
            .find(|p| p.label() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown preset size `{s}`")))
    }
}

pub const PRESET_VOCAB: usize = 50304;
pub const PRESET_CONTEXT: usize = 2048;

impl ModelConfig {
    pub fn preset(variant: Variant, size: PresetSize) -> Self {
        let (d_model, n_layers, n_heads) = size.dims();
        Self::new(variant, d_model, n_layers, n_heads, PRESET_VOCAB, PRESET_CONTEXT)
    }

    /// Desk-scale byte-level model: 2 layers, d = 64, one head, context 512.
    pub fn smoke(variant: Variant) -> Self {
        Self::new(variant, 64, 2, 1, 256, 512)
    }

    pub fn new(
        variant: Variant,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        vocab_size: usize,
        context_len: usize,
    ) -> Self {
        ModelConfig {
            variant,
            d_model,
            n_layers,
            n_heads,
            vocab_size,
            context_len,
            rotary_fraction: default_rotary_fraction(),
            rotary_base: default_rotary_base(),
            s_init: None,
            s_scale: None,
            alpha_init: default_alpha_init(),
            qk_norm: true,
            use_lerp: true,
            factors: FactorConfig::default(),
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn d_mlp(&self) -> usize {
        4 * self.d_model
    }

    /// Initial `s_Z`: 0.01 for anGPT, `1/√d_model` for nGPT.
    pub fn s_init_value(&self) -> f64 {
        self.s_init.unwrap_or(match self.variant {
            Variant::Angpt => 0.01,
            _ => 1.0 / (self.d_model as f64).sqrt(),
        })
    }

    pub fn s_scale_value(&self) -> f64 {
        self.s_scale
            .unwrap_or(1.0 / (self.d_model as f64).sqrt())
    }

    /// Copy with every optional field filled in.
    pub fn materialized(&self) -> Self {
        let mut c = self.clone();
        c.s_init = Some(self.s_init_value());
        c.s_scale = Some(self.s_scale_value());
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return bad("d_model, n_layers and n_heads must be positive".into());
        }
        if self.vocab_size < 2 || self.context_len == 0 {
            return bad("vocab_size must be ≥ 2 and context_len ≥ 1".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..=1.0).contains(&self.rotary_fraction) {
            return bad(format!("rotary_fraction {} outside [0, 1]", self.rotary_fraction));
        }
        let rot = self.rotary_fraction * self.d_head() as f64;
        if rot.fract() != 0.0 || (rot as usize) % 2 != 0 {
            return bad(format!("rotated sub-dimension {rot} must be an even integer"));
        }
        if self.rotary_base <= 0.0 {
            return bad("rotary_base must be positive".into());
        }
        if self.s_init_value() <= 0.0 || self.s_scale_value() <= 0.0 {
            return bad("s_init and s_scale must be positive".into());
        }
        if !self.alpha_init.is_finite() {
            return bad("alpha_init must be finite".into());
        }
        let f = &self.factors;
        if f.nu_acf <= 0.0 || f.global_scale_constant <= 0.0 || f.global_scale_all <= 0.0 {
            return bad("factor values and global scales must be positive".into());
        }
        Ok(())
    }
}
