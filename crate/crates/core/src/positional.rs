//! Positional-embedding schemes.
//!
//! Two families: additive schemes (`NoPe`, `Absolute`, `Learnable`) add a
//! vector to the initial hidden state, while `RelativeT5`, `Alibi` and
//! `Rotary` leave the hidden state alone and modify the query-key product.
//! Positions are 1-based everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Frequency base shared by sinusoidal and rotary embeddings.
pub const FREQUENCY_BASE: f64 = 10000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PeKind {
    #[serde(rename = "nope")]
    NoPe,
    Absolute,
    Learnable,
    #[serde(rename = "relative_t5")]
    RelativeT5 {
        #[serde(default = "default_buckets")]
        buckets: usize,
        #[serde(default = "default_max_distance")]
        max_distance: usize,
    },
    Alibi,
    #[default]
    Rotary,
}

fn default_buckets() -> usize {
    32
}

fn default_max_distance() -> usize {
    128
}

impl PeKind {
    pub fn relative_t5() -> Self {
        PeKind::RelativeT5 {
            buckets: default_buckets(),
            max_distance: default_max_distance(),
        }
    }

    /// True for schemes that add a vector to the initial hidden state.
    pub fn is_additive(self) -> bool {
        matches!(self, PeKind::Absolute | PeKind::Learnable)
    }

    /// True for schemes that add a bias to the query-key logit.
    pub fn is_logit_bias(self) -> bool {
        matches!(self, PeKind::RelativeT5 { .. } | PeKind::Alibi)
    }

    pub fn name(self) -> &'static str {
        match self {
            PeKind::NoPe => "nope",
            PeKind::Absolute => "absolute",
            PeKind::Learnable => "learnable",
            PeKind::RelativeT5 { .. } => "relative_t5",
            PeKind::Alibi => "alibi",
            PeKind::Rotary => "rotary",
        }
    }

    pub fn validate(self, d: usize, head_dim: usize) -> Result<()> {
        match self {
            PeKind::Absolute if d % 2 != 0 => Err(Error::Config(format!(
                "absolute positional embedding needs an even hidden size, got {d}"
            ))),
            PeKind::Rotary if head_dim % 2 != 0 => Err(Error::Config(format!(
                "rotary embedding needs an even head size, got {head_dim}"
            ))),
            PeKind::RelativeT5 {
                buckets,
                max_distance,
            } if buckets < 2 || max_distance <= buckets / 2 => Err(Error::Config(format!(
                "relative buckets need B >= 2 and D > B/2 (B={buckets}, D={max_distance})"
            ))),
            _ => Ok(()),
        }
    }
}

impl std::str::FromStr for PeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "nope" | "none" => PeKind::NoPe,
            "absolute" | "sinusoidal" => PeKind::Absolute,
            "learnable" => PeKind::Learnable,
            "relative" | "relative_t5" | "t5" => PeKind::relative_t5(),
            "alibi" => PeKind::Alibi,
            "rotary" | "rope" => PeKind::Rotary,
            other => return Err(Error::Config(format!("unknown positional embedding `{other}`"))),
        })
    }
}

/// `ω_i = 10000^(−2(i−1)/dim)` for `i = 1..=dim/2`.
pub fn frequencies(dim: usize) -> Vec<f64> {
    (0..dim / 2)
        .map(|i| FREQUENCY_BASE.powf(-2.0 * i as f64 / dim as f64))
        .collect()
}

/// Interleaved `[sin(ω₁t), cos(ω₁t), sin(ω₂t), …]`.
pub fn sinusoid(t: f64, d: usize) -> Vec<f64> {
    frequencies(d)
        .into_iter()
        .flat_map(|w| [(w * t).sin(), (w * t).cos()])
        .collect()
}

/// Vector added to the hidden state of the token at position `t`.
///
/// `learnable` is the position table (one row per position) for the
/// `Learnable` scheme; it is ignored otherwise.
pub fn additive_embedding<F: Scalar>(
    kind: PeKind,
    t: usize,
    d: usize,
    learnable: Option<&Tensor<F>>,
) -> Result<Vec<F>> {
    match kind {
        PeKind::Absolute => {
            if d % 2 != 0 {
                return Err(Error::Config(format!("odd hidden size {d} for absolute embedding")));
            }
            Ok(sinusoid(t as f64, d).into_iter().map(F::of).collect())
        }
        PeKind::Learnable => {
            let table = learnable
                .ok_or_else(|| Error::Config("learnable embedding without a table".into()))?;
            if t == 0 || t > table.rows() {
                return Err(Error::Range {
                    what: "position",
                    value: t,
                    limit: table.rows(),
                });
            }
            Ok(table.row(t - 1).to_vec())
        }
        _ => Ok(vec![F::zero(); d]),
    }
}

/// Bucketed distance of the relative scheme: exact below `B/2`, logarithmic
/// up to `D`, saturated at `B − 1` beyond.
pub fn t5_bucket(distance: usize, buckets: usize, max_distance: usize) -> usize {
    let half = buckets / 2;
    if distance < half {
        distance
    } else if distance < max_distance {
        let ratio = (distance as f64 / half as f64).ln() / (max_distance as f64 / half as f64).ln();
        (half + (ratio * half as f64).floor() as usize).min(buckets - 1)
    } else {
        buckets - 1
    }
}

/// Head-specific ALiBi slope `2^(−h·2^(−log₂H+3))` for 1-based head `h`.
pub fn alibi_slope(head: usize, heads: usize) -> f64 {
    let exponent = 2f64.powf(-(heads as f64).log2() + 3.0);
    2f64.powf(-(head as f64) * exponent)
}

/// Additive logit bias between query position `i` and key position `j`
/// (`i ≥ j`) for 1-based head `head` out of `heads`.
///
/// The relative scheme returns the bucket value itself, which is also how a
/// freshly initialised learnable bucket table is filled.
pub fn relative_bias(kind: PeKind, i: usize, j: usize, head: usize, heads: usize) -> f64 {
    debug_assert!(i >= j);
    let distance = i.saturating_sub(j);
    match kind {
        PeKind::RelativeT5 {
            buckets,
            max_distance,
        } => t5_bucket(distance, buckets, max_distance) as f64,
        PeKind::Alibi => -(distance as f64) * alibi_slope(head, heads),
        _ => 0.0,
    }
}

/// Per-pair `(cos, sin)` of the rotation applied at position `t`.
pub fn rotary_angles(t: usize, head_dim: usize) -> Vec<(f64, f64)> {
    frequencies(head_dim)
        .into_iter()
        .map(|w| {
            let a = w * t as f64;
            (a.cos(), a.sin())
        })
        .collect()
}

/// `v · R_{Θ,−t}` for a row vector: each pair rotates by `t·ω_i`.
pub fn rotary_rotate(v: &[f64], t: i64) -> Result<Vec<f64>> {
    if v.len() % 2 != 0 {
        return Err(Error::Config(format!("rotary needs an even head size, got {}", v.len())));
    }
    let mut out = v.to_vec();
    for (p, w) in frequencies(v.len()).into_iter().enumerate() {
        let (s, c) = (w * t as f64).sin_cos();
        let (a, b) = (v[2 * p], v[2 * p + 1]);
        out[2 * p] = a * c - b * s;
        out[2 * p + 1] = a * s + b * c;
    }
    Ok(out)
}

/// Dense block-diagonal `R_{Θ,m}` of size `dim×dim`.
pub fn rotation_matrix(dim: usize, m: f64) -> Tensor<f64> {
    let mut r = Tensor::zeros(&[dim, dim]);
    for (p, w) in frequencies(dim).into_iter().enumerate() {
        let (s, c) = (m * w).sin_cos();
        let k = 2 * p;
        r.set(k, k, c);
        r.set(k, k + 1, -s);
        r.set(k + 1, k, s);
        r.set(k + 1, k + 1, c);
    }
    r
}
