use serde::Serialize;

use super::config::{ModelConfig, Variant};

/// Axis along which a matrix `[out, in]` is kept at (or below) unit norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    /// Each row, i.e. each output neuron's input weights.
    Rows,
    /// Each column, i.e. the embedding-side vectors of an output map.
    Columns,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Matrix { constraint: Option<Constraint> },
    /// RMSNorm gain, initialized to ones.
    Gain,
    /// Reparameterized scalar vector: effective = `(s_init/s_scale)·stored`.
    Scalar { s_init: f64, s_scale: f64 },
}

impl Role {
    pub fn constraint(&self) -> Option<Constraint> {
        match self {
            Role::Matrix { constraint } => *constraint,
            _ => None,
        }
    }

    pub fn is_matrix(&self) -> bool {
        matches!(self, Role::Matrix { .. })
    }

    /// Multiplier from stored to effective value.
    pub fn read_scale(&self) -> f64 {
        match self {
            Role::Scalar { s_init, s_scale } => s_init / s_scale,
            _ => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Embedding,
    Attention,
    Mlp,
    Head,
    NormGains,
    Scalars,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Embedding => "embedding",
            Group::Attention => "attention",
            Group::Mlp => "mlp",
            Group::Head => "head",
            Group::NormGains => "norm_gains",
            Group::Scalars => "scalars",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
    pub group: Group,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Indices into the parameter list for one block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerIndex {
    pub w_qkv: usize,
    pub w_p: usize,
    pub w_uz: usize,
    pub w_d: usize,
    pub attn_gamma: Option<usize>,
    pub mlp_gamma: Option<usize>,
    /// Per-head attention scale.
    pub g: Option<usize>,
    /// nGPT shared q/k channel scale.
    pub s_qk: Option<usize>,
    pub alpha_attn: Option<usize>,
    pub alpha_mlp: Option<usize>,
    pub s_u: Option<usize>,
    pub s_z: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelIndex {
    pub embed: usize,
    pub layers: Vec<LayerIndex>,
    pub head_gamma: Option<usize>,
    pub head_w: usize,
    pub logit_scale: Option<usize>,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, role: Role, group: Group) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape,
            role,
            group,
        });
        self.specs.len() - 1
    }
}

/// Parameter list of a model in creation order, without allocating any
/// values.
pub fn param_specs(cfg: &ModelConfig) -> (Vec<ParamSpec>, ModelIndex) {
    use Constraint::{Columns, Rows};
    let v = cfg.variant;
    let (d, h, dk, f, vocab) = (cfg.d_model, cfg.n_heads, cfg.d_head(), cfg.d_mlp(), cfg.vocab_size);
    let scale = cfg.s_scale_value();
    let sqrt_dk = (dk as f64).sqrt();
    let (row, col) = match v {
        Variant::GptPlus => (None, None),
        Variant::Ngpt => (Some(Rows), Some(Columns)),
        Variant::Angpt => (Some(Rows), Some(Rows)),
    };
    let mat = |c| Role::Matrix { constraint: c };
    let scalar = |s_init, s_scale| Role::Scalar { s_init, s_scale };

    let mut b = Builder { specs: Vec::new() };
    let mut idx = ModelIndex {
        embed: b.push("embed".into(), vec![vocab, d], mat(row), Group::Embedding),
        ..Default::default()
    };
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        let mut li = LayerIndex::default();
        if v == Variant::GptPlus {
            li.attn_gamma = Some(b.push(p("attn.gamma"), vec![d], Role::Gain, Group::NormGains));
        }
        li.w_qkv = b.push(p("attn.w_qkv"), vec![3 * d, d], mat(row), Group::Attention);
        match v {
            Variant::GptPlus if cfg.qk_norm => {
                li.g = Some(b.push(p("attn.g"), vec![h], scalar(sqrt_dk, sqrt_dk), Group::Scalars));
            }
            Variant::GptPlus => {}
            Variant::Ngpt => {
                li.s_qk = Some(b.push(p("attn.s_qk"), vec![d], scalar(1.0, scale), Group::Scalars));
            }
            Variant::Angpt => {
                li.g = Some(b.push(p("attn.g"), vec![h], scalar(sqrt_dk, scale), Group::Scalars));
            }
        }
        li.w_p = b.push(p("attn.w_p"), vec![d, d], mat(col), Group::Attention);
        if v.is_normalized() {
            li.alpha_attn =
                Some(b.push(p("attn.alpha"), vec![d], scalar(cfg.alpha_init, scale), Group::Scalars));
        }
        if v == Variant::GptPlus {
            li.mlp_gamma = Some(b.push(p("mlp.gamma"), vec![d], Role::Gain, Group::NormGains));
        }
        li.w_uz = b.push(p("mlp.w_uz"), vec![2 * f, d], mat(row), Group::Mlp);
        if v == Variant::Ngpt {
            li.s_u = Some(b.push(p("mlp.s_u"), vec![f], scalar(1.0, 1.0), Group::Scalars));
            li.s_z = Some(b.push(p("mlp.s_z"), vec![f], scalar(1.0, 1.0), Group::Scalars));
        }
        li.w_d = b.push(p("mlp.w_d"), vec![d, f], mat(col), Group::Mlp);
        if v.is_normalized() {
            li.alpha_mlp =
                Some(b.push(p("mlp.alpha"), vec![d], scalar(cfg.alpha_init, scale), Group::Scalars));
        }
        idx.layers.push(li);
    }
    if v == Variant::GptPlus {
        idx.head_gamma = Some(b.push("head.gamma".into(), vec![d], Role::Gain, Group::NormGains));
    }
    idx.head_w = b.push("head.w".into(), vec![vocab, d], mat(row), Group::Head);
    if v.is_normalized() {
        idx.logit_scale = Some(b.push(
            "head.s_z".into(),
            vec![vocab],
            scalar(cfg.s_init_value(), scale),
            Group::Scalars,
        ));
    }
    (b.specs, idx)
}

/// Total parameter count of a configuration.
pub fn param_count(cfg: &ModelConfig) -> usize {
    param_specs(cfg).0.iter().map(ParamSpec::numel).sum()
}

/// Per-group counts in [`Group`] order; groups with no members are
/// omitted.
pub fn group_counts(cfg: &ModelConfig) -> Vec<(Group, usize)> {
    let mut out: Vec<(Group, usize)> = Vec::new();
    let mut specs = param_specs(cfg).0;
    specs.sort_by_key(|s| s.group);
    for s in specs {
        match out.last_mut() {
            Some((g, n)) if *g == s.group => *n += s.numel(),
            _ => out.push((s.group, s.numel())),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::PresetSize;

    #[test]
    fn groups_sum_to_total() {
        for v in Variant::ALL {
            let c = ModelConfig::preset(v, PresetSize::M62);
            let sum: usize = group_counts(&c).iter().map(|(_, n)| n).sum();
            assert_eq!(sum, param_count(&c));
        }
    }

    #[test]
    fn constraint_axes() {
        let (specs, idx) = param_specs(&ModelConfig::smoke(Variant::Ngpt));
        let l = &idx.layers[0];
        assert_eq!(specs[l.w_p].role.constraint(), Some(Constraint::Columns));
        assert_eq!(specs[l.w_qkv].role.constraint(), Some(Constraint::Rows));
        let (specs, idx) = param_specs(&ModelConfig::smoke(Variant::Angpt));
        assert_eq!(specs[idx.layers[0].w_d].role.constraint(), Some(Constraint::Rows));
        let (specs, _) = param_specs(&ModelConfig::smoke(Variant::GptPlus));
        assert!(specs.iter().all(|s| s.role.constraint().is_none()));
    }
}
