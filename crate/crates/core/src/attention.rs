//! Generalized attention: kernel × similarity × normalization, explicit
//! key/value bias slots, and the causal / prefix / window masks.
//!
//! For query row `i` the output is `Z_i⁻¹ · Σ_j sim(φ(q_i), φ(k_j)) · v_j`.
//! Dot products are always scaled by `1/√d_h`. A bias slot, when present,
//! sits at key column 0, is visible to every query and is never masked.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::positional::{self, PeKind};
use crate::tensor::{Scalar, Tape, Tensor, Unary, Var};

/// Supported (similarity, normalization) combinations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    /// `exp(q·k/√d_h)` normalized by its row sum (softmax).
    #[default]
    SoftmaxExp,
    SigmoidNoNorm,
    SigmoidNormalized,
    EluPlusOneNoNorm,
    /// `(elu(q)+1)·(elu(k)+1)ᵀ/√d_h` normalized by its row sum.
    LinearEluKernelNormalized,
    IdentityDotNoNorm,
    /// Per-head MLP kernel with `Z_i = max(|Σ_j sim|, 1)`.
    MlpKernelAbsClamped,
    MlpKernelNoNorm,
    /// Known to fail in training; constructible for reproduction.
    EluPlusOneNormalized,
    /// Known to fail in training; constructible for reproduction.
    EluKernelNoNorm,
    /// Known to fail in training; constructible for reproduction.
    IdentityDotAbsClamped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    Identity,
    EluPlusOne,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Similarity {
    Exp,
    Sigmoid,
    EluPlusOne,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    Sum,
    AbsClamped,
    None,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 11] = [
        AttentionVariant::SoftmaxExp,
        AttentionVariant::SigmoidNoNorm,
        AttentionVariant::SigmoidNormalized,
        AttentionVariant::EluPlusOneNoNorm,
        AttentionVariant::LinearEluKernelNormalized,
        AttentionVariant::IdentityDotNoNorm,
        AttentionVariant::MlpKernelAbsClamped,
        AttentionVariant::MlpKernelNoNorm,
        AttentionVariant::EluPlusOneNormalized,
        AttentionVariant::EluKernelNoNorm,
        AttentionVariant::IdentityDotAbsClamped,
    ];

    pub fn kernel(self) -> Kernel {
        use AttentionVariant::*;
        match self {
            LinearEluKernelNormalized | EluKernelNoNorm => Kernel::EluPlusOne,
            MlpKernelAbsClamped | MlpKernelNoNorm => Kernel::Mlp,
            _ => Kernel::Identity,
        }
    }

    pub fn similarity(self) -> Similarity {
        use AttentionVariant::*;
        match self {
            SoftmaxExp => Similarity::Exp,
            SigmoidNoNorm | SigmoidNormalized => Similarity::Sigmoid,
            EluPlusOneNoNorm | EluPlusOneNormalized => Similarity::EluPlusOne,
            _ => Similarity::Linear,
        }
    }

    pub fn normalization(self) -> Normalization {
        use AttentionVariant::*;
        match self {
            SoftmaxExp | SigmoidNormalized | LinearEluKernelNormalized | EluPlusOneNormalized => {
                Normalization::Sum
            }
            MlpKernelAbsClamped | IdentityDotAbsClamped => Normalization::AbsClamped,
            _ => Normalization::None,
        }
    }

    pub fn is_normalized(self) -> bool {
        self.normalization() != Normalization::None
    }

    /// Similarities can be negative (identity and MLP kernels).
    pub fn is_signed(self) -> bool {
        use AttentionVariant::*;
        matches!(
            self,
            IdentityDotNoNorm | IdentityDotAbsClamped | MlpKernelAbsClamped | MlpKernelNoNorm
        )
    }

    pub fn known_unstable(self) -> bool {
        use AttentionVariant::*;
        matches!(self, EluPlusOneNormalized | EluKernelNoNorm | IdentityDotAbsClamped)
    }
}

fn default_norm_scale() -> f64 {
    1.0
}

fn default_mlp_hidden() -> usize {
    16
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionOp {
    #[serde(default)]
    pub variant: AttentionVariant,
    /// Normalization scale α: normalized variants use `Z_i / α`.
    #[serde(default = "default_norm_scale")]
    pub norm_scale: f64,
    /// Hidden width of the per-head kernel MLP.
    #[serde(default = "default_mlp_hidden")]
    pub mlp_hidden: usize,
}

impl Default for AttentionOp {
    fn default() -> Self {
        Self::new(AttentionVariant::SoftmaxExp)
    }
}

impl AttentionOp {
    pub fn new(variant: AttentionVariant) -> Self {
        Self {
            variant,
            norm_scale: 1.0,
            mlp_hidden: default_mlp_hidden(),
        }
    }

    pub fn with_scale(mut self, alpha: f64) -> Self {
        self.norm_scale = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.norm_scale.is_finite() && self.norm_scale > 0.0) {
            return Err(Error::Config(format!(
                "norm_scale must be positive, got {}",
                self.norm_scale
            )));
        }
        if self.variant.kernel() == Kernel::Mlp && self.mlp_hidden == 0 {
            return Err(Error::Config("mlp_hidden must be at least 1".into()));
        }
        Ok(())
    }
}

/// Fixed value-slot vector used by K biases.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FixedValue {
    #[default]
    Zeros,
    /// `m · e₁`.
    Basis { magnitude: f64 },
    /// `m · 1/√d_h`.
    Uniform { magnitude: f64 },
}

impl FixedValue {
    pub fn vector(self, head_dim: usize) -> Vec<f64> {
        match self {
            FixedValue::Zeros => vec![0.0; head_dim],
            FixedValue::Basis { magnitude } => {
                let mut v = vec![0.0; head_dim];
                v[0] = magnitude;
                v
            }
            FixedValue::Uniform { magnitude } => {
                vec![magnitude / (head_dim as f64).sqrt(); head_dim]
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BiasKind {
    #[default]
    None,
    /// A reserved learnable token prepended to every sequence.
    SinkToken,
    /// Learnable key and value slot.
    KvBiases,
    /// Learnable key slot with a fixed value; only the first
    /// `learnable_dims` key coordinates are trainable, the rest stay zero.
    KBiases {
        #[serde(default)]
        fixed_v: FixedValue,
        #[serde(default)]
        learnable_dims: Option<usize>,
    },
    /// Learnable vector added to every attention output row.
    VBiases,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct BiasScheme {
    #[serde(flatten)]
    pub kind: BiasKind,
    /// One bias per layer shared by all heads instead of one per head.
    #[serde(default)]
    pub head_sharing: bool,
}

impl BiasScheme {
    pub fn new(kind: BiasKind) -> Self {
        Self {
            kind,
            head_sharing: false,
        }
    }

    /// True when the key sequence gains an extra slot at column 0.
    pub fn has_slot(&self) -> bool {
        matches!(self.kind, BiasKind::KvBiases | BiasKind::KBiases { .. })
    }

    pub fn slot_cols(&self) -> usize {
        usize::from(self.has_slot())
    }

    pub fn learnable_key_dims(&self, head_dim: usize) -> Option<usize> {
        match self.kind {
            BiasKind::KvBiases => Some(head_dim),
            BiasKind::KBiases { learnable_dims, .. } => Some(learnable_dims.unwrap_or(head_dim)),
            _ => None,
        }
    }

    pub fn validate(&self, head_dim: usize) -> Result<()> {
        if let BiasKind::KBiases {
            learnable_dims: Some(da),
            ..
        } = self.kind
        {
            if da == 0 || da > head_dim {
                return Err(Error::Config(format!(
                    "K-bias learnable dims must be in 1..={head_dim}, got {da}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskKind {
    #[default]
    Causal,
    /// Prefix language modeling with prefix length `p`.
    Prefix {
        p: usize,
        /// Prefix tokens see each other; `false` keeps the prefix strictly causal.
        #[serde(default = "default_true")]
        bidirectional: bool,
    },
    /// Shifted window of `w` most recent tokens (including the query itself).
    Window { w: usize },
}

fn default_true() -> bool {
    true
}

impl MaskKind {
    pub fn prefix(p: usize) -> Self {
        MaskKind::Prefix {
            p,
            bidirectional: true,
        }
    }

    /// Whether query `i` may attend to key `j` (both 1-based).
    pub fn allows(self, i: usize, j: usize) -> bool {
        match self {
            MaskKind::Causal => j <= i,
            MaskKind::Prefix { p, bidirectional } => {
                if bidirectional && i <= p {
                    j <= p
                } else {
                    j <= i
                }
            }
            MaskKind::Window { w } => j <= i && j + w > i,
        }
    }

    pub fn validate(self, context: usize) -> Result<()> {
        match self {
            MaskKind::Window { w } if w < 1 => {
                Err(Error::Config("window size must be at least 1".into()))
            }
            MaskKind::Prefix { p, .. } if p < 1 || p >= context => Err(Error::Config(format!(
                "prefix length must be in 1..{context}, got {p}"
            ))),
            _ => Ok(()),
        }
    }

    /// First 1-based target position scored by the auto-regressive loss.
    pub fn first_scored(self) -> usize {
        match self {
            MaskKind::Prefix { p, .. } => p + 1,
            _ => 2,
        }
    }
}

/// Mask tensors for `t` queries and `t + slot_cols` keys.
pub struct Masks<F> {
    /// 0 where allowed, the sentinel elsewhere.
    pub additive: Tensor<F>,
    /// 1 where allowed, 0 elsewhere.
    pub binary: Tensor<F>,
}

pub fn build_masks<F: Scalar>(mask: MaskKind, t: usize, slot_cols: usize) -> Masks<F> {
    let cols = t + slot_cols;
    let mut additive = Tensor::full(&[t, cols], F::mask_sentinel());
    let mut binary = Tensor::zeros(&[t, cols]);
    for i in 0..t {
        for c in 0..cols {
            let allowed = c < slot_cols || mask.allows(i + 1, c - slot_cols + 1);
            if allowed {
                additive.set(i, c, F::zero());
                binary.set(i, c, F::one());
            }
        }
    }
    Masks { additive, binary }
}

/// Tape handles for one head's attention inputs.
pub struct HeadInputs {
    /// `T×d_h`, positional rotation already applied.
    pub q: Var,
    pub k: Var,
    pub v: Var,
    /// `1×d_h` key slot.
    pub k_slot: Option<Var>,
    /// `1×d_h` value slot; required whenever `k_slot` is set.
    pub v_slot: Option<Var>,
    /// `1×d_h` vector added to every output row.
    pub v_add: Option<Var>,
    /// `T×(T+slot)` additive logit bias from the positional scheme.
    pub logit_bias: Option<Var>,
    /// Kernel MLP weights `(d_h×m, m×d_h)`.
    pub kernel: Option<(Var, Var)>,
}

/// Tape handles produced by one head.
pub struct HeadOutput {
    pub output: Var,
    /// Softmax scores for `SoftmaxExp`, masked raw similarities otherwise.
    pub weights: Var,
    /// `φ(q)·φ(k)ᵀ/√d_h` before positional biases.
    pub dots: Var,
    pub q_feat: Var,
    pub k_feat: Var,
}

fn apply_kernel<F: Scalar>(
    tape: &mut Tape<F>,
    kernel: Kernel,
    x: Var,
    mlp: Option<(Var, Var)>,
) -> Result<Var> {
    match kernel {
        Kernel::Identity => Ok(x),
        Kernel::EluPlusOne => {
            let e = tape.unary(x, Unary::Elu)?;
            tape.add_scalar(e, F::one())
        }
        Kernel::Mlp => {
            let (w1, w2) =
                mlp.ok_or_else(|| Error::Config("MLP kernel without weights".into()))?;
            let h = tape.matmul(x, w1)?;
            let h = tape.unary(h, Unary::Relu)?;
            tape.matmul(h, w2)
        }
    }
}

/// Records one head's attention on the tape.
pub fn attend_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    op: &AttentionOp,
    inputs: &HeadInputs,
    masks: &Masks<F>,
) -> Result<HeadOutput> {
    let variant = op.variant;
    let d_h = tape.value(inputs.q).cols();
    let kernel = variant.kernel();
    let q_feat = apply_kernel(tape, kernel, inputs.q, inputs.kernel)?;
    let k_real = apply_kernel(tape, kernel, inputs.k, inputs.kernel)?;
    let (k_feat, values) = match inputs.k_slot {
        Some(ks) => {
            let ks = apply_kernel(tape, kernel, ks, inputs.kernel)?;
            let vs = inputs
                .v_slot
                .ok_or_else(|| Error::Config("key slot without a value slot".into()))?;
            (
                tape.concat_rows(&[ks, k_real])?,
                tape.concat_rows(&[vs, inputs.v])?,
            )
        }
        None => (k_real, inputs.v),
    };
    if tape.value(k_feat).rows() != masks.binary.cols() {
        return Err(Error::dim(
            "attend",
            format!(
                "{} keys vs mask of {} columns",
                tape.value(k_feat).rows(),
                masks.binary.cols()
            ),
        ));
    }
    let raw = tape.matmul_t(q_feat, false, k_feat, true)?;
    let dots = tape.scale(raw, F::of(1.0 / (d_h as f64).sqrt()))?;
    let logits = match inputs.logit_bias {
        Some(b) => tape.add(dots, b)?,
        None => dots,
    };
    let alpha = op.norm_scale;
    let (weights, attn) = match variant.similarity() {
        Similarity::Exp => {
            let a = tape.softmax(logits, Some(&masks.additive))?;
            let scaled = if alpha == 1.0 {
                a
            } else {
                tape.scale(a, F::of(alpha))?
            };
            (a, scaled)
        }
        sim_kind => {
            let sim = match sim_kind {
                Similarity::Sigmoid => tape.unary(logits, Unary::Sigmoid)?,
                Similarity::EluPlusOne => {
                    let e = tape.unary(logits, Unary::Elu)?;
                    tape.add_scalar(e, F::one())?
                }
                _ => logits,
            };
            let mask = tape.constant(masks.binary.clone());
            let sim = tape.mul(sim, mask)?;
            let attn = match variant.normalization() {
                Normalization::None => sim,
                norm => {
                    let mut z = tape.row_sum(sim)?;
                    if norm == Normalization::AbsClamped {
                        z = tape.unary(z, Unary::MaxAbsOne)?;
                    }
                    if alpha != 1.0 {
                        z = tape.scale(z, F::of(1.0 / alpha))?;
                    }
                    tape.div_rows(sim, z)?
                }
            };
            (sim, attn)
        }
    };
    let mut output = tape.matmul(attn, values)?;
    if let Some(v) = inputs.v_add {
        output = tape.add_row(output, v)?;
    }
    Ok(HeadOutput {
        output,
        weights,
        dots,
        q_feat,
        k_feat,
    })
}

/// Per-head bias state for the standalone [`attend`] entry point.
#[derive(Clone, Debug, Default)]
pub struct HeadState<F> {
    /// Key slot (learnable part; zero-padded up to `d_h`).
    pub k_slot: Option<Vec<F>>,
    /// Learnable value slot (KV biases) or added vector (V biases).
    pub v_vec: Option<Vec<F>>,
    pub kernel: Option<(Tensor<F>, Tensor<F>)>,
    /// Relative-position bucket values; defaults to the bucket function.
    pub relative_table: Option<Vec<F>>,
}

pub struct Attended<F> {
    pub output: Tensor<F>,
    pub scores: Tensor<F>,
}

/// Value slot row for a scheme with a key slot.
pub fn slot_value<F: Scalar>(bias: &BiasScheme, head_dim: usize, learned: Option<&[F]>) -> Result<Vec<F>> {
    match bias.kind {
        BiasKind::KBiases { fixed_v, .. } => {
            Ok(fixed_v.vector(head_dim).into_iter().map(F::of).collect())
        }
        BiasKind::KvBiases => learned
            .map(<[F]>::to_vec)
            .ok_or_else(|| Error::Config("KV biases need a learned value slot".into())),
        _ => Err(Error::Config("scheme has no value slot".into())),
    }
}

/// Logit-bias index grid for the relative scheme: bucket per (query, key column).
pub fn relative_index(
    pe: PeKind,
    t: usize,
    slot_cols: usize,
) -> Option<Vec<Option<usize>>> {
    let PeKind::RelativeT5 {
        buckets,
        max_distance,
    } = pe
    else {
        return None;
    };
    let cols = t + slot_cols;
    let mut index = vec![None; t * cols];
    for i in 0..t {
        for j in 0..=i {
            index[i * cols + slot_cols + j] =
                Some(positional::t5_bucket(i - j, buckets, max_distance));
        }
    }
    Some(index)
}

/// Constant ALiBi bias grid for 1-based `head`.
pub fn alibi_grid<F: Scalar>(t: usize, slot_cols: usize, head: usize, heads: usize) -> Tensor<F> {
    let cols = t + slot_cols;
    let mut g = Tensor::zeros(&[t, cols]);
    for i in 0..t {
        for j in 0..=i {
            g.set(
                i,
                slot_cols + j,
                F::of(positional::relative_bias(PeKind::Alibi, i + 1, j + 1, head, heads)),
            );
        }
    }
    g
}

/// Per-row rotation tables for positions `first..first+rows`.
pub fn rotary_tables<F: Scalar>(rows: usize, head_dim: usize, first: usize) -> (Vec<F>, Vec<F>) {
    let mut cos = Vec::with_capacity(rows * head_dim / 2);
    let mut sin = Vec::with_capacity(rows * head_dim / 2);
    for r in 0..rows {
        for (c, s) in positional::rotary_angles(first + r, head_dim) {
            cos.push(F::of(c));
            sin.push(F::of(s));
        }
    }
    (cos, sin)
}

/// Single-head attention over plain tensors.
///
/// `head` is 1-based out of `heads`; it selects the ALiBi slope. Rotary is
/// applied to `queries` and `keys` here. Returned scores are the softmax
/// weights for `SoftmaxExp` and masked raw similarities otherwise.
#[allow(clippy::too_many_arguments)]
pub fn attend<F: Scalar>(
    queries: &Tensor<F>,
    keys: &Tensor<F>,
    values: &Tensor<F>,
    op: &AttentionOp,
    bias: &BiasScheme,
    state: &HeadState<F>,
    mask: MaskKind,
    pe: PeKind,
    head: usize,
    heads: usize,
) -> Result<Attended<F>> {
    op.validate()?;
    let (t, d_h) = (queries.rows(), queries.cols());
    if keys.shape() != queries.shape() || values.shape() != queries.shape() {
        return Err(Error::dim("attend", "queries, keys and values must share a shape"));
    }
    if let MaskKind::Window { w } = mask {
        if w < 1 {
            return Err(Error::Config("window size must be at least 1".into()));
        }
    }
    bias.validate(d_h)?;
    let slot = bias.slot_cols();
    let mut tape = Tape::new();
    let mut q = tape.constant(queries.clone());
    let mut k = tape.constant(keys.clone());
    let v = tape.constant(values.clone());
    if pe == PeKind::Rotary {
        pe.validate(d_h, d_h)?;
        let (c, s) = rotary_tables::<F>(t, d_h, 1);
        q = tape.rotary(q, c.clone(), s.clone())?;
        k = tape.rotary(k, c, s)?;
    }
    let (k_slot, v_slot) = if bias.has_slot() {
        let ks = state
            .k_slot
            .clone()
            .ok_or_else(|| Error::Config("bias scheme needs a key slot".into()))?;
        let ks = tape.constant(Tensor::matrix(1, ks.len(), ks)?);
        let ks = tape.pad_cols(ks, d_h)?;
        let vs = slot_value(bias, d_h, state.v_vec.as_deref())?;
        let vs = tape.constant(Tensor::matrix(1, d_h, vs)?);
        (Some(ks), Some(vs))
    } else {
        (None, None)
    };
    let v_add = match (bias.kind, &state.v_vec) {
        (BiasKind::VBiases, Some(vv)) => Some(tape.constant(Tensor::matrix(1, d_h, vv.clone())?)),
        (BiasKind::VBiases, None) => {
            return Err(Error::Config("V biases need a value vector".into()))
        }
        _ => None,
    };
    let logit_bias = match pe {
        PeKind::Alibi => Some(tape.constant(alibi_grid(t, slot, head, heads))),
        PeKind::RelativeT5 { buckets, .. } => {
            let table = state
                .relative_table
                .clone()
                .unwrap_or_else(|| (0..buckets).map(|b| F::of(b as f64)).collect());
            let table = tape.constant(Tensor::matrix(buckets, 1, table)?);
            let index = relative_index(pe, t, slot).unwrap_or_default();
            Some(tape.gather_scalars(table, index, t, t + slot)?)
        }
        _ => None,
    };
    let kernel = match &state.kernel {
        Some((w1, w2)) => Some((tape.constant(w1.clone()), tape.constant(w2.clone()))),
        None => None,
    };
    let masks = build_masks::<F>(mask, t, slot);
    let out = attend_on_tape(
        &mut tape,
        op,
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
        &masks,
    )?;
    let scores = tape.value(out.weights).clone();
    if !scores.is_finite() {
        return Err(Error::NonFinite { op: "attend" });
    }
    Ok(Attended {
        output: tape.value(out.output).clone(),
        scores,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadCombine {
    /// `Concat_h(O_h) · W_O` with `W_O` of shape `d×d`.
    #[default]
    Concat,
    /// `Σ_h O_h · W_O` with one shared `d_h×d` projection.
    Add,
}

/// Combines per-head outputs on the tape.
pub fn multi_head_combine<F: Scalar>(
    tape: &mut Tape<F>,
    heads: &[Var],
    mode: HeadCombine,
    projection: Var,
) -> Result<Var> {
    let d_h = tape.value(heads[0]).cols();
    let h = heads.len();
    let proj = tape.value(projection).shape().to_vec();
    match mode {
        HeadCombine::Concat => {
            if proj.len() != 2 || proj[0] != d_h * h {
                return Err(Error::Config(format!(
                    "concat projection must have {} rows, got {proj:?}",
                    d_h * h
                )));
            }
            let cat = if h == 1 { heads[0] } else { tape.concat_cols(heads)? };
            tape.matmul(cat, projection)
        }
        HeadCombine::Add => {
            if proj.len() != 2 || proj[0] != d_h {
                return Err(Error::Config(format!(
                    "shared projection must have {d_h} rows, got {proj:?}"
                )));
            }
            let mut acc = tape.matmul(heads[0], projection)?;
            for &o in &heads[1..] {
                let p = tape.matmul(o, projection)?;
                acc = tape.add(acc, p)?;
            }
            Ok(acc)
        }
    }
}

/// Standalone head combination over plain tensors.
pub fn combine_heads<F: Scalar>(
    heads: &[Tensor<F>],
    mode: HeadCombine,
    projection: &Tensor<F>,
) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = heads.iter().map(|h| tape.constant(h.clone())).collect();
    let p = tape.constant(projection.clone());
    let out = multi_head_combine(&mut tape, &vars, mode, p)?;
    Ok(tape.value(out).clone())
}

/// Row-normalized (absolute) similarities used to measure sinks for
/// variants that do not normalize in the forward pass.
///
/// Softmax scores are returned unchanged. A row without mass is an error.
pub fn proxy_scores(similarities: &Tensor<f64>, variant: AttentionVariant) -> Result<Tensor<f64>> {
    let (scores, degenerate) = proxy_scores_lenient(similarities, variant);
    match degenerate.first() {
        Some(&row) => Err(Error::DegenerateRow {
            op: "proxy_scores",
            row,
        }),
        None => Ok(scores),
    }
}

/// Like [`proxy_scores`] but zero-mass rows are left at zero and reported.
pub fn proxy_scores_lenient(
    similarities: &Tensor<f64>,
    variant: AttentionVariant,
) -> (Tensor<f64>, Vec<usize>) {
    if variant == AttentionVariant::SoftmaxExp {
        return (similarities.clone(), Vec::new());
    }
    let signed = variant.is_signed();
    let mut out = similarities.clone();
    let mut degenerate = Vec::new();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        if signed {
            for v in row.iter_mut() {
                *v = v.abs();
            }
        }
        let total: f64 = row.iter().sum();
        if total == 0.0 || !total.is_finite() {
            row.iter_mut().for_each(|v| *v = 0.0);
            degenerate.push(r);
            continue;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    (out, degenerate)
}
