//! Sink metrics, activation and query-key reports, and closed-form
//! repeated-token oracles.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionVariant};
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, NormPlacement};
use crate::positional::{self, PeKind};
use crate::tensor::Tensor;

fn check_stack(attention: &Tensor<f64>) -> Result<(usize, usize, usize)> {
    match *attention.shape() {
        [l, h, t, t2] if t == t2 => Ok((l, h, t)),
        ref s => Err(Error::dim("alpha_scores", format!("expected [L, H, T, T], got {s:?}"))),
    }
}

/// `α_k^{l,h} = (1/(T−k+1)) Σ_{i=k}^{T} A_{i,k}` for a `[L, H, T, T]` stack; `k` is 1-based.
pub fn alpha_scores(attention: &Tensor<f64>, k: usize) -> Result<Vec<Vec<f64>>> {
    let (l, h, t) = check_stack(attention)?;
    if k == 0 || k > t {
        return Err(Error::Range {
            what: "token index k",
            value: k,
            limit: t,
        });
    }
    let data = attention.data();
    let mut out = vec![vec![0.0; h]; l];
    for (li, row) in out.iter_mut().enumerate() {
        for (hi, alpha) in row.iter_mut().enumerate() {
            let base = (li * h + hi) * t * t;
            let mut sum = 0.0;
            for i in k - 1..t {
                sum += data[base + i * t + (k - 1)];
            }
            *alpha = sum / (t - k + 1) as f64;
        }
    }
    Ok(out)
}

/// `Sink_k^ε`: fraction of (layer, head) pairs with `α_k > ε`.
pub fn sink_metric(attention: &Tensor<f64>, k: usize, eps: f64) -> Result<f64> {
    let alpha = alpha_scores(attention, k)?;
    Ok(fraction_above(&alpha, eps))
}

fn fraction_above(alpha: &[Vec<f64>], eps: f64) -> f64 {
    let total: usize = alpha.iter().map(Vec::len).sum();
    let above = alpha.iter().flatten().filter(|&&a| a > eps).count();
    above as f64 / total as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Metric per sequence, then the mean over sequences.
    #[default]
    PerSequence,
    /// Mean α per head over sequences, then the threshold.
    MeanAlpha,
}

/// Metric over several sequences' attention stacks.
pub fn sink_over_sequences(
    stacks: &[Tensor<f64>],
    k: usize,
    eps: f64,
    aggregation: Aggregation,
) -> Result<f64> {
    if stacks.is_empty() {
        return Err(Error::Input("no sequences to aggregate".into()));
    }
    match aggregation {
        Aggregation::PerSequence => {
            let mut total = 0.0;
            for s in stacks {
                total += sink_metric(s, k, eps)?;
            }
            Ok(total / stacks.len() as f64)
        }
        Aggregation::MeanAlpha => Ok(fraction_above(&mean_alpha(stacks, k)?, eps)),
    }
}

fn mean_alpha(stacks: &[Tensor<f64>], k: usize) -> Result<Vec<Vec<f64>>> {
    let mut acc: Option<Vec<Vec<f64>>> = None;
    for s in stacks {
        let a = alpha_scores(s, k)?;
        match &mut acc {
            None => acc = Some(a),
            Some(acc) => {
                if acc.len() != a.len() || acc[0].len() != a[0].len() {
                    return Err(Error::dim("sink_over_sequences", "stacks differ in L or H"));
                }
                for (ra, rb) in acc.iter_mut().zip(&a) {
                    for (x, y) in ra.iter_mut().zip(rb) {
                        *x += y;
                    }
                }
            }
        }
    }
    let mut acc = acc.unwrap_or_default();
    for row in &mut acc {
        for x in row.iter_mut() {
            *x /= stacks.len() as f64;
        }
    }
    Ok(acc)
}

/// Attention stack `[L, H, T, T]` over real-token columns.
///
/// Non-softmax variants are converted to proxy scores over the full row
/// (bias slot included) before the slot column is dropped. Returns the stack
/// and the number of zero-mass rows, which contribute zeros.
pub fn attention_stack(trace: &ForwardTrace, variant: AttentionVariant) -> Result<(Tensor<f64>, usize)> {
    let l = trace.layers.len();
    let h = trace.layers.first().map_or(0, |x| x.heads.len());
    if l == 0 || h == 0 {
        return Err(Error::Input("trace holds no attention scores".into()));
    }
    let t = trace.seq_len;
    let mut data = Vec::with_capacity(l * h * t * t);
    let mut degenerate = 0;
    for layer in &trace.layers {
        for head in &layer.heads {
            let (scores, bad) = attention::proxy_scores_lenient(&head.scores, variant);
            degenerate += bad.len();
            for r in 0..t {
                data.extend_from_slice(&scores.row(r)[trace.slot_cols..]);
            }
        }
    }
    Ok((Tensor::new(vec![l, h, t, t], data)?, degenerate))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub k: usize,
    pub eps: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub layer: usize,
    pub head: usize,
    pub k: usize,
    /// Mean of `α_k` over sequences.
    pub alpha: f64,
    /// Fraction of sequences whose `α_k` exceeds the first threshold for this `k`.
    pub sequence_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkReport {
    pub t: usize,
    pub n_sequences: usize,
    pub aggregation: Aggregation,
    pub layers: usize,
    pub heads: usize,
    pub alpha: Vec<AlphaRow>,
    pub metrics: Vec<MetricValue>,
    /// Zero-mass proxy rows (counted as α contributions of zero).
    pub degenerate_rows: usize,
}

pub fn sink_report(
    stacks: &[Tensor<f64>],
    metrics: &[(usize, f64)],
    aggregation: Aggregation,
    degenerate_rows: usize,
) -> Result<SinkReport> {
    let first = stacks
        .first()
        .ok_or_else(|| Error::Input("no sequences to report".into()))?;
    let (l, h, t) = check_stack(first)?;
    if metrics.is_empty() {
        return Err(Error::Config("at least one (k, eps) pair is required".into()));
    }
    for &(_, eps) in metrics {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::Config(format!("threshold {eps} is outside (0, 1)")));
        }
    }
    let mut values = Vec::with_capacity(metrics.len());
    for &(k, eps) in metrics {
        values.push(MetricValue {
            k,
            eps,
            value: sink_over_sequences(stacks, k, eps, aggregation)?,
        });
    }
    let mut ks: Vec<usize> = Vec::new();
    for &(k, _) in metrics {
        if !ks.contains(&k) {
            ks.push(k);
        }
    }
    let mut alpha = Vec::new();
    for k in ks {
        let eps = metrics.iter().find(|m| m.0 == k).map(|m| m.1).unwrap_or(0.3);
        let per_seq = stacks
            .iter()
            .map(|s| alpha_scores(s, k))
            .collect::<Result<Vec<_>>>()?;
        for li in 0..l {
            for hi in 0..h {
                let n = per_seq.len() as f64;
                alpha.push(AlphaRow {
                    layer: li + 1,
                    head: hi + 1,
                    k,
                    alpha: per_seq.iter().map(|a| a[li][hi]).sum::<f64>() / n,
                    sequence_mean: per_seq.iter().filter(|a| a[li][hi] > eps).count() as f64 / n,
                });
            }
        }
    }
    Ok(SinkReport {
        t,
        n_sequences: stacks.len(),
        aggregation,
        layers: l,
        heads: h,
        alpha,
        metrics: values,
        degenerate_rows,
    })
}

impl SinkReport {
    /// `layer,head,alpha,sequence_mean` for the first requested `k`.
    pub fn alpha_csv(&self) -> String {
        let mut out = String::from("layer,head,alpha,sequence_mean\n");
        let k = self.alpha.first().map(|r| r.k);
        for r in self.alpha.iter().filter(|r| Some(r.k) == k) {
            let _ = writeln!(out, "{},{},{},{}", r.layer, r.head, r.alpha, r.sequence_mean);
        }
        out
    }

    /// `L×H` grid of mean α for `k`.
    pub fn alpha_grid(&self, k: usize) -> Vec<Vec<f64>> {
        let mut grid = vec![vec![0.0; self.heads]; self.layers];
        for r in self.alpha.iter().filter(|r| r.k == k) {
            grid[r.layer - 1][r.head - 1] = r.alpha;
        }
        grid
    }

    pub fn metric(&self, k: usize, eps: f64) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.k == k && m.eps == eps)
            .map(|m| m.value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRatio {
    pub first: f64,
    pub rest_mean: f64,
    /// `first / rest_mean`; absent when the rest have zero norm.
    pub ratio: Option<f64>,
}

impl NormRatio {
    fn of(norms: &[f64]) -> Self {
        let first = norms[0];
        let rest_mean = norms[1..].iter().sum::<f64>() / (norms.len() - 1) as f64;
        Self {
            first,
            rest_mean,
            ratio: (rest_mean > 0.0).then(|| first / rest_mean),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadNorms {
    pub query: NormRatio,
    pub key: NormRatio,
    pub value: NormRatio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerActivation {
    pub layer: usize,
    pub hidden: NormRatio,
    /// Post-norm blocks: ratio before the block's final norm.
    pub pre_norm: Option<NormRatio>,
    pub heads: Vec<HeadNorms>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationReport {
    pub placement: NormPlacement,
    pub layers: Vec<LayerActivation>,
}

/// `‖h_1^l‖ / mean_{t≠1} ‖h_t^l‖` per layer plus per-head query/key/value analogues.
pub fn massive_ratio(trace: &ForwardTrace, placement: NormPlacement) -> Result<ActivationReport> {
    if trace.seq_len < 2 {
        return Err(Error::Input("massive-activation ratios need T >= 2".into()));
    }
    if trace.hidden.len() != trace.layers.len() + 1 {
        return Err(Error::Input("trace was captured without hidden states".into()));
    }
    let mut layers = Vec::with_capacity(trace.layers.len());
    for (l, layer) in trace.layers.iter().enumerate() {
        let heads = layer
            .heads
            .iter()
            .filter_map(|h| {
                let (q, k, v) = (h.q.as_ref()?, h.k.as_ref()?, h.v.as_ref()?);
                let kn = k.row_norms();
                Some(HeadNorms {
                    query: NormRatio::of(&q.row_norms()),
                    key: NormRatio::of(&kn[trace.slot_cols..]),
                    value: NormRatio::of(&v.row_norms()),
                })
            })
            .collect();
        layers.push(LayerActivation {
            layer: l + 1,
            hidden: NormRatio::of(&trace.hidden[l + 1].row_norms()),
            pre_norm: layer.pre_norm.as_ref().map(|p| NormRatio::of(&p.row_norms())),
            heads,
        });
    }
    Ok(ActivationReport { placement, layers })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QkGrid {
    pub layer: usize,
    pub head: usize,
    /// `cos(q_t, k_j)`; 0 where either vector has zero norm.
    pub cos: Tensor<f64>,
    /// `‖q_t‖·‖k_j‖`.
    pub norms: Tensor<f64>,
    /// `cos · norms / √d_h`, the logit before positional biases.
    pub product: Tensor<f64>,
    pub degenerate: usize,
}

/// Angle/norm decomposition of every head's query-key logits.
pub fn qk_decompose(trace: &ForwardTrace) -> Result<Vec<QkGrid>> {
    let mut out = Vec::new();
    for (l, layer) in trace.layers.iter().enumerate() {
        for (h, head) in layer.heads.iter().enumerate() {
            let (q, k) = match (&head.q, &head.k) {
                (Some(q), Some(k)) => (q, k),
                _ => return Err(Error::Input("trace was captured without query/key features".into())),
            };
            let scale = (q.cols() as f64).sqrt();
            let (qn, kn) = (q.row_norms(), k.row_norms());
            let (rows, cols) = (q.rows(), k.rows());
            let mut cos = Tensor::zeros(&[rows, cols]);
            let mut norms = Tensor::zeros(&[rows, cols]);
            let mut product = Tensor::zeros(&[rows, cols]);
            let mut degenerate = 0;
            for i in 0..rows {
                for j in 0..cols {
                    let n = qn[i] * kn[j];
                    norms.set(i, j, n);
                    if n == 0.0 {
                        degenerate += 1;
                        continue;
                    }
                    let dot: f64 = q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum();
                    let c = dot / n;
                    cos.set(i, j, c);
                    product.set(i, j, c * n / scale);
                }
            }
            out.push(QkGrid {
                layer: l + 1,
                head: h + 1,
                cos,
                norms,
                product,
                degenerate,
            });
        }
    }
    Ok(out)
}

/// Inputs required by the closed-form repeated-token oracles.
#[derive(Clone, Debug, PartialEq)]
pub enum OracleInput {
    None,
    /// Bucket values of one head's relative bias table.
    RelativeTable(Vec<f64>),
    /// 1-based head out of `heads`.
    Alibi { head: usize, heads: usize },
    /// `ξ` bounding `|q·k|` for every pair.
    Rotary { xi: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum OracleRow {
    /// Expected scores of query `t` over keys `1..=t`.
    Exact(Vec<f64>),
    /// Upper bound on every score of query `t`.
    Bound(f64),
}

/// Prop-style upper bound `e^{2ξ}/(e^{2ξ}+t−1)`.
pub fn rotary_bound(xi: f64, t: usize) -> f64 {
    let e = (2.0 * xi).exp();
    e / (e + (t as f64 - 1.0))
}

fn softmax_of(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Closed-form attention row of query `t` (1-based) on `t` repeated tokens.
pub fn oracle_repeated(pe: PeKind, input: &OracleInput, t: usize) -> Result<OracleRow> {
    if t == 0 {
        return Err(Error::Misuse("oracle needs t >= 1".into()));
    }
    match (pe, input) {
        (PeKind::NoPe, OracleInput::None) => Ok(OracleRow::Exact(vec![1.0 / t as f64; t])),
        (
            PeKind::RelativeT5 {
                buckets,
                max_distance,
            },
            OracleInput::RelativeTable(table),
        ) => {
            if table.len() != buckets {
                return Err(Error::Misuse(format!(
                    "table has {} entries for {buckets} buckets",
                    table.len()
                )));
            }
            let logits: Vec<f64> = (1..=t)
                .map(|i| table[positional::t5_bucket(t - i, buckets, max_distance)])
                .collect();
            Ok(OracleRow::Exact(softmax_of(&logits)))
        }
        (PeKind::Alibi, &OracleInput::Alibi { head, heads }) => {
            let logits: Vec<f64> = (1..=t)
                .map(|i| positional::relative_bias(PeKind::Alibi, t, i, head, heads))
                .collect();
            Ok(OracleRow::Exact(softmax_of(&logits)))
        }
        (PeKind::Rotary, &OracleInput::Rotary { xi }) => Ok(OracleRow::Bound(rotary_bound(xi, t))),
        (pe, input) => Err(Error::Misuse(format!(
            "no repeated-token oracle for {} with {input:?}",
            pe.name()
        ))),
    }
}

/// Errors unless every token equals the first.
pub fn require_repeated(tokens: &[usize]) -> Result<()> {
    match tokens.first() {
        Some(&x) if tokens.iter().all(|&t| t == x) => Ok(()),
        _ => Err(Error::Misuse("oracle input is not a repeated-token sequence".into())),
    }
}
