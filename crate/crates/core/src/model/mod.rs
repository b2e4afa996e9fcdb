//! Decoder-only transformer stack in pre-norm or post-norm form.

mod checkpoint;
mod trace;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{write_atomic, Checkpoint, Named, Section, FORMAT_VERSION, MAGIC};
pub use trace::{ForwardTrace, HeadTrace, LayerTrace};

use crate::attention::{
    self, AttentionOp, BiasKind, BiasScheme, HeadCombine, HeadInputs, MaskKind, Masks,
};
use crate::error::{Error, Result};
use crate::positional::PeKind;
use crate::tensor::{Scalar, Tape, Tensor, Unary, Var};

pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// `H^l = FFN(LN(O^l + H^(l−1))) + O^l + H^(l−1)`, attention reading `LN(H^(l−1))`.
    #[default]
    PreNorm,
    /// `H^l = LN(FFN(LN(O^l + H^(l−1))) + LN(O^l + H^(l−1)))`.
    PostNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    RmsNorm,
    LayerNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FfnActivation {
    Relu,
    Gelu,
    Swish,
    Reglu,
    Geglu,
    #[default]
    Swiglu,
}

impl FfnActivation {
    pub fn is_gated(self) -> bool {
        matches!(self, FfnActivation::Reglu | FfnActivation::Geglu | FfnActivation::Swiglu)
    }

    fn unary(self) -> Unary {
        match self {
            FfnActivation::Relu | FfnActivation::Reglu => Unary::Relu,
            FfnActivation::Gelu | FfnActivation::Geglu => Unary::Gelu,
            FfnActivation::Swish | FfnActivation::Swiglu => Unary::Swish,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ffn: usize,
    pub vocab: usize,
    pub context: usize,
    pub pe: PeKind,
    pub norm_placement: NormPlacement,
    pub norm_kind: NormKind,
    pub ffn_activation: FfnActivation,
    pub attention: AttentionOp,
    pub bias: BiasScheme,
    pub mask: MaskKind,
    pub head_combine: HeadCombine,
    /// Standard deviation of the truncated-normal initialization.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            layers: 2,
            heads: 2,
            d_ffn: 128,
            vocab: 259,
            context: 128,
            pe: PeKind::Rotary,
            norm_placement: NormPlacement::PreNorm,
            norm_kind: NormKind::RmsNorm,
            ffn_activation: FfnActivation::Swiglu,
            attention: AttentionOp::default(),
            bias: BiasScheme::default(),
            mask: MaskKind::Causal,
            head_combine: HeadCombine::Concat,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads.max(1)
    }

    /// Checks all shape arithmetic; returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let positive = [
            ("d", self.d),
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_ffn", self.d_ffn),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d={} is not divisible by heads={}",
                self.d, self.heads
            )));
        }
        if self.vocab < 4 {
            return Err(Error::Config("vocab must leave room for reserved ids".into()));
        }
        if self.context < 2 {
            return Err(Error::Config("context must be at least 2".into()));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        let d_h = self.head_dim();
        self.pe.validate(self.d, d_h)?;
        self.attention.validate()?;
        self.bias.validate(d_h)?;
        self.mask.validate(self.context)?;
        let mut warnings = Vec::new();
        let variant = self.attention.variant;
        if variant.known_unstable() {
            warnings.push(format!(
                "attention variant {variant:?} is known to be unstable in training"
            ));
        }
        if self.pe.is_logit_bias()
            && variant.is_normalized()
            && variant.similarity() == attention::Similarity::Linear
        {
            warnings.push(format!(
                "{variant:?} with an additive logit bias can produce non-positive normalizers"
            ));
        }
        if self.attention.norm_scale != 1.0 && !variant.is_normalized() {
            warnings.push("norm_scale has no effect on an unnormalized variant".into());
        }
        Ok(warnings)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Name, shape and decay class of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Subject to decoupled weight decay.
    pub decay: bool,
    init: Init,
}

impl ParamSpec {
    fn new(name: String, shape: Vec<usize>, init: Init, decay: bool) -> Self {
        Self {
            name,
            shape,
            decay,
            init,
        }
    }
}

/// Ordered parameter layout implied by a configuration.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let (d, h, d_h) = (config.d, config.heads, config.head_dim());
    let mut specs = vec![ParamSpec::new(
        "embed.tokens".into(),
        vec![config.vocab, d],
        Init::Normal,
        true,
    )];
    if config.pe == PeKind::Learnable {
        specs.push(ParamSpec::new(
            "embed.positions".into(),
            vec![config.context, d],
            Init::Normal,
            true,
        ));
    }
    let norm = |specs: &mut Vec<ParamSpec>, prefix: &str| {
        specs.push(ParamSpec::new(format!("{prefix}.gain"), vec![d], Init::Ones, false));
        if config.norm_kind == NormKind::LayerNorm {
            specs.push(ParamSpec::new(format!("{prefix}.bias"), vec![d], Init::Zeros, false));
        }
    };
    let bias_rows = if config.bias.head_sharing { 1 } else { h };
    for l in 0..config.layers {
        let p = format!("layers.{l}");
        norm(&mut specs, &format!("{p}.attn_norm"));
        for w in ["wq", "wk", "wv"] {
            specs.push(ParamSpec::new(format!("{p}.attn.{w}"), vec![d, d], Init::Normal, true));
        }
        let wo_rows = match config.head_combine {
            HeadCombine::Concat => d,
            HeadCombine::Add => d_h,
        };
        specs.push(ParamSpec::new(format!("{p}.attn.wo"), vec![wo_rows, d], Init::Normal, true));
        if let Some(da) = config.bias.learnable_key_dims(d_h) {
            specs.push(ParamSpec::new(
                format!("{p}.attn.k_bias"),
                vec![bias_rows, da],
                Init::Normal,
                true,
            ));
        }
        if matches!(config.bias.kind, BiasKind::KvBiases | BiasKind::VBiases) {
            specs.push(ParamSpec::new(
                format!("{p}.attn.v_bias"),
                vec![bias_rows, d_h],
                Init::Normal,
                true,
            ));
        }
        if let PeKind::RelativeT5 { buckets, .. } = config.pe {
            specs.push(ParamSpec::new(
                format!("{p}.attn.rel_bias"),
                vec![buckets, h],
                Init::Normal,
                false,
            ));
        }
        if config.attention.variant.kernel() == attention::Kernel::Mlp {
            let m = config.attention.mlp_hidden;
            for hh in 0..h {
                specs.push(ParamSpec::new(
                    format!("{p}.attn.kernel.h{hh}.w1"),
                    vec![d_h, m],
                    Init::Normal,
                    true,
                ));
                specs.push(ParamSpec::new(
                    format!("{p}.attn.kernel.h{hh}.w2"),
                    vec![m, d_h],
                    Init::Normal,
                    true,
                ));
            }
        }
        norm(&mut specs, &format!("{p}.ffn_norm"));
        specs.push(ParamSpec::new(format!("{p}.ffn.w1"), vec![d, config.d_ffn], Init::Normal, true));
        if config.ffn_activation.is_gated() {
            specs.push(ParamSpec::new(format!("{p}.ffn.w3"), vec![d, config.d_ffn], Init::Normal, true));
        }
        specs.push(ParamSpec::new(format!("{p}.ffn.w2"), vec![config.d_ffn, d], Init::Normal, true));
    }
    norm(&mut specs, "final_norm");
    specs.push(ParamSpec::new("unembed".into(), vec![d, config.vocab], Init::Normal, true));
    specs
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Named parameter tensors in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<F> {
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Params<F> {
    pub fn from_parts(specs: Vec<ParamSpec>, tensors: Vec<Tensor<F>>) -> Result<Self> {
        if specs.len() != tensors.len() {
            return Err(Error::Format("parameter count does not match layout".into()));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.shape != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
        }
        let index = specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        Ok(Self {
            specs,
            tensors,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn cast<G: Scalar>(&self) -> Params<G> {
        Params {
            specs: self.specs.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Deterministic initialization: each tensor draws from its own stream keyed
/// by `(seed, name)`, so adding a parameter never shifts the others.
pub fn init_params<F: Scalar>(config: &ModelConfig, seed: u64) -> Result<Params<F>> {
    config.validate()?;
    let std = config.init_std;
    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    let specs = param_specs(config);
    let tensors = specs
        .iter()
        .map(|s| {
            let n: usize = s.shape.iter().product();
            let data = match s.init {
                Init::Zeros => vec![F::zero(); n],
                Init::Ones => vec![F::one(); n],
                Init::Normal => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(&s.name));
                    (0..n)
                        .map(|_| loop {
                            let x: f64 = normal.sample(&mut rng);
                            if x.abs() <= 2.0 * std {
                                break F::of(x);
                            }
                        })
                        .collect()
                }
            };
            Tensor::new(s.shape.clone(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    Params::from_parts(specs, tensors)
}

/// What the forward pass records besides logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Capture {
    pub attention: bool,
    pub hidden: bool,
    pub qk: bool,
}

impl Capture {
    pub const NONE: Capture = Capture {
        attention: false,
        hidden: false,
        qk: false,
    };
    pub const ALL: Capture = Capture {
        attention: true,
        hidden: true,
        qk: true,
    };
}

/// A configuration with its parameters.
#[derive(Clone, Debug)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: Params<F>,
}

struct Ctx<'a> {
    vars: &'a [Var],
    params: &'a HashMap<String, usize>,
}

impl Ctx<'_> {
    fn var(&self, name: &str) -> Result<Var> {
        self.params
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
    }

    fn opt(&self, name: &str) -> Option<Var> {
        self.params.get(name).map(|&i| self.vars[i])
    }
}

impl<F: Scalar> Model<F> {
    pub fn init(config: ModelConfig) -> Result<Self> {
        let params = init_params(&config, config.seed)?;
        Ok(Self { config, params })
    }

    pub fn new(config: ModelConfig, params: Params<F>) -> Result<Self> {
        config.validate()?;
        let expected = param_specs(&config);
        if expected != params.specs {
            return Err(Error::Format("parameters do not match the configuration".into()));
        }
        Ok(Self { config, params })
    }

    /// Canonical text form of the configuration.
    pub fn config_text(&self) -> Result<String> {
        toml::to_string(&self.config).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn named_params(&self) -> Named<F> {
        self.params
            .specs
            .iter()
            .zip(&self.params.tensors)
            .map(|(s, t)| (s.name.clone(), t.clone()))
            .collect()
    }

    /// Checkpoint holding only configuration and parameters.
    pub fn to_checkpoint(&self) -> Result<Checkpoint<F>> {
        Ok(Checkpoint {
            config: self.config_text()?,
            params: self.named_params(),
            moment1: Vec::new(),
            moment2: Vec::new(),
            state: String::new(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<F>) -> Result<Self> {
        let config: ModelConfig =
            toml::from_str(&ckpt.config).map_err(|e| Error::Format(e.to_string()))?;
        let specs = param_specs(&config);
        if specs.len() != ckpt.params.len()
            || specs.iter().zip(&ckpt.params).any(|(s, (n, _))| &s.name != n)
        {
            return Err(Error::Format("checkpoint parameters do not match its config".into()));
        }
        let tensors = ckpt.params.iter().map(|(_, t)| t.clone()).collect();
        Model::new(config, Params::from_parts(specs, tensors)?)
    }

    /// Registers every parameter on `tape` as a trainable leaf.
    pub fn register(&self, tape: &mut Tape<F>) -> Vec<Var> {
        self.params
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(i, t.clone()))
            .collect()
    }

    /// Logits and trace for one sequence.
    pub fn forward(&self, tokens: &[usize], capture: Capture) -> Result<(Tensor<F>, ForwardTrace)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .params
            .tensors
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        let (logits, trace) = self.build(&mut tape, &vars, tokens, capture)?;
        Ok((tape.value(logits).clone(), trace))
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        let c = &self.config;
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > c.context {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds context {}",
                tokens.len(),
                c.context
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= c.vocab) {
            return Err(Error::Input(format!("token id {bad} is outside vocab {}", c.vocab)));
        }
        Ok(())
    }

    fn norm(&self, tape: &mut Tape<F>, ctx: &Ctx, prefix: &str, x: Var) -> Result<Var> {
        let gain = ctx.var(&format!("{prefix}.gain"))?;
        match self.config.norm_kind {
            NormKind::RmsNorm => tape.rms_norm(x, gain, NORM_EPS),
            NormKind::LayerNorm => {
                let bias = ctx.var(&format!("{prefix}.bias"))?;
                tape.layer_norm(x, gain, bias, NORM_EPS)
            }
        }
    }

    /// Records the full forward pass on `tape`, reading parameters from `vars`.
    pub fn build(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        tokens: &[usize],
        capture: Capture,
    ) -> Result<(Var, ForwardTrace)> {
        self.check_tokens(tokens)?;
        let c = &self.config;
        let t = tokens.len();
        let ctx = Ctx {
            vars,
            params: &self.params.index,
        };
        let mut x = tape.gather(ctx.var("embed.tokens")?, tokens)?;
        match c.pe {
            PeKind::Absolute => {
                let mut table = Tensor::<F>::zeros(&[t, c.d]);
                for pos in 0..t {
                    let row = crate::positional::additive_embedding::<F>(c.pe, pos + 1, c.d, None)?;
                    table.row_mut(pos).copy_from_slice(&row);
                }
                let pe = tape.constant(table);
                x = tape.add(x, pe)?;
            }
            PeKind::Learnable => {
                let positions: Vec<usize> = (0..t).collect();
                let pe = tape.gather(ctx.var("embed.positions")?, &positions)?;
                x = tape.add(x, pe)?;
            }
            _ => {}
        }
        let mut trace = ForwardTrace::new(c, t, capture);
        trace.record_hidden(tape.value(x), None);
        let masks = attention::build_masks::<F>(c.mask, t, c.bias.slot_cols());
        for l in 0..c.layers {
            let p = format!("layers.{l}");
            x = match c.norm_placement {
                NormPlacement::PreNorm => {
                    let normed = self.norm(tape, &ctx, &format!("{p}.attn_norm"), x)?;
                    let o = self.attention_block(tape, &ctx, l, normed, &masks, &mut trace)?;
                    let resid = tape.add(o, x)?;
                    let normed = self.norm(tape, &ctx, &format!("{p}.ffn_norm"), resid)?;
                    let f = self.ffn(tape, &ctx, &p, normed)?;
                    let out = tape.add(f, resid)?;
                    trace.record_hidden(tape.value(out), None);
                    out
                }
                NormPlacement::PostNorm => {
                    let o = self.attention_block(tape, &ctx, l, x, &masks, &mut trace)?;
                    let resid = tape.add(o, x)?;
                    let normed = self.norm(tape, &ctx, &format!("{p}.attn_norm"), resid)?;
                    let f = self.ffn(tape, &ctx, &p, normed)?;
                    let pre = tape.add(f, normed)?;
                    let out = self.norm(tape, &ctx, &format!("{p}.ffn_norm"), pre)?;
                    trace.record_hidden(tape.value(out), Some(tape.value(pre)));
                    out
                }
            };
        }
        let normed = self.norm(tape, &ctx, "final_norm", x)?;
        let logits = tape.matmul(normed, ctx.var("unembed")?)?;
        Ok((logits, trace))
    }

    fn ffn(&self, tape: &mut Tape<F>, ctx: &Ctx, p: &str, x: Var) -> Result<Var> {
        let act = self.config.ffn_activation;
        let a = tape.matmul(x, ctx.var(&format!("{p}.ffn.w1"))?)?;
        let mut hdn = tape.unary(a, act.unary())?;
        if act.is_gated() {
            let gate = tape.matmul(x, ctx.var(&format!("{p}.ffn.w3"))?)?;
            hdn = tape.mul(hdn, gate)?;
        }
        tape.matmul(hdn, ctx.var(&format!("{p}.ffn.w2"))?)
    }

    fn attention_block(
        &self,
        tape: &mut Tape<F>,
        ctx: &Ctx,
        layer: usize,
        x: Var,
        masks: &Masks<F>,
        trace: &mut ForwardTrace,
    ) -> Result<Var> {
        let c = &self.config;
        let p = format!("layers.{layer}.attn");
        let (h_count, d_h) = (c.heads, c.head_dim());
        let t = tape.value(x).rows();
        let slot = c.bias.slot_cols();
        let q_all = tape.matmul(x, ctx.var(&format!("{p}.wq"))?)?;
        let k_all = tape.matmul(x, ctx.var(&format!("{p}.wk"))?)?;
        let v_all = tape.matmul(x, ctx.var(&format!("{p}.wv"))?)?;
        let rot = (c.pe == PeKind::Rotary).then(|| attention::rotary_tables::<F>(t, d_h, 1));
        let k_bias = ctx.opt(&format!("{p}.k_bias"));
        let v_bias = ctx.opt(&format!("{p}.v_bias"));
        let rel = ctx.opt(&format!("{p}.rel_bias"));
        let rel_index = attention::relative_index(c.pe, t, slot);
        let fixed_v = match c.bias.kind {
            BiasKind::KBiases { .. } => Some(tape.constant(Tensor::matrix(
                1,
                d_h,
                attention::slot_value::<F>(&c.bias, d_h, None)?,
            )?)),
            _ => None,
        };
        let mut outputs = Vec::with_capacity(h_count);
        for h in 0..h_count {
            let mut q = if h_count == 1 { q_all } else { tape.slice_cols(q_all, h * d_h, d_h)? };
            let mut k = if h_count == 1 { k_all } else { tape.slice_cols(k_all, h * d_h, d_h)? };
            let v = if h_count == 1 { v_all } else { tape.slice_cols(v_all, h * d_h, d_h)? };
            if let Some((cos, sin)) = &rot {
                q = tape.rotary(q, cos.clone(), sin.clone())?;
                k = tape.rotary(k, cos.clone(), sin.clone())?;
            }
            let bias_row = if c.bias.head_sharing { 0 } else { h };
            let k_slot = match k_bias {
                Some(kb) => {
                    let row = tape.gather(kb, &[bias_row])?;
                    Some(if tape.value(row).cols() < d_h {
                        tape.pad_cols(row, d_h)?
                    } else {
                        row
                    })
                }
                None => None,
            };
            let v_row = match v_bias {
                Some(vb) => Some(tape.gather(vb, &[bias_row])?),
                None => None,
            };
            let (v_slot, v_add) = match c.bias.kind {
                BiasKind::KvBiases => (v_row, None),
                BiasKind::KBiases { .. } => (fixed_v, None),
                BiasKind::VBiases => (None, v_row),
                _ => (None, None),
            };
            let logit_bias = match c.pe {
                PeKind::Alibi => {
                    Some(tape.constant(attention::alibi_grid::<F>(t, slot, h + 1, h_count)))
                }
                PeKind::RelativeT5 { .. } => {
                    let table = rel.ok_or_else(|| Error::Format("missing relative bias table".into()))?;
                    let col = tape.slice_cols(table, h, 1)?;
                    let index = rel_index.clone().unwrap_or_default();
                    Some(tape.gather_scalars(col, index, t, t + slot)?)
                }
                _ => None,
            };
            let kernel = if c.attention.variant.kernel() == attention::Kernel::Mlp {
                Some((
                    ctx.var(&format!("{p}.kernel.h{h}.w1"))?,
                    ctx.var(&format!("{p}.kernel.h{h}.w2"))?,
                ))
            } else {
                None
            };
            let out = attention::attend_on_tape(
                tape,
                &c.attention,
                &HeadInputs {
                    q,
                    k,
                    v,
                    k_slot,
                    v_slot,
                    v_add,
                    logit_bias,
                    kernel,
                },
                masks,
            )?;
            trace.record_head(tape, layer, &out, v);
            outputs.push(out.output);
        }
        attention::multi_head_combine(tape, &outputs, c.head_combine, ctx.var(&format!("{p}.wo"))?)
    }
}
