use serde::Serialize;

use super::{Capture, ModelConfig};
use crate::attention::HeadOutput;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Per-head record of one attention evaluation (stored in f64).
#[derive(Clone, Debug, Serialize)]
pub struct HeadTrace {
    /// Softmax scores for softmax attention, masked raw similarities otherwise.
    /// Columns include the bias slot (column 0) when the scheme has one.
    pub scores: Tensor<f64>,
    /// `φ(q)·φ(k)ᵀ/√d_h` before positional biases.
    pub dots: Option<Tensor<f64>>,
    /// Query features after rotation and kernel map.
    pub q: Option<Tensor<f64>>,
    /// Key features, bias slot first when present.
    pub k: Option<Tensor<f64>>,
    pub v: Option<Tensor<f64>>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct LayerTrace {
    pub heads: Vec<HeadTrace>,
    /// Post-norm blocks: the residual sum fed into the block's final norm.
    pub pre_norm: Option<Tensor<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ForwardTrace {
    pub seq_len: usize,
    /// Bias-slot columns prepended to every score row.
    pub slot_cols: usize,
    /// `H^0 … H^L` when hidden capture is on.
    pub hidden: Vec<Tensor<f64>>,
    pub layers: Vec<LayerTrace>,
    #[serde(skip)]
    capture: Capture,
}

impl ForwardTrace {
    pub(super) fn new(config: &ModelConfig, seq_len: usize, capture: Capture) -> Self {
        Self {
            seq_len,
            slot_cols: config.bias.slot_cols(),
            hidden: Vec::new(),
            layers: vec![LayerTrace::default(); config.layers],
            capture,
        }
    }

    pub(super) fn record_hidden<F: Scalar>(&mut self, h: &Tensor<F>, pre_norm: Option<&Tensor<F>>) {
        if !self.capture.hidden {
            return;
        }
        self.hidden.push(h.to_f64());
        if let Some(pre) = pre_norm {
            let layer = self.hidden.len() - 2;
            self.layers[layer].pre_norm = Some(pre.to_f64());
        }
    }

    pub(super) fn record_head<F: Scalar>(
        &mut self,
        tape: &Tape<F>,
        layer: usize,
        out: &HeadOutput,
        v: Var,
    ) {
        if !self.capture.attention && !self.capture.qk {
            return;
        }
        let qk = self.capture.qk;
        let grab = |var: Var| tape.value(var).to_f64();
        self.layers[layer].heads.push(HeadTrace {
            scores: grab(out.weights),
            dots: qk.then(|| grab(out.dots)),
            q: qk.then(|| grab(out.q_feat)),
            k: qk.then(|| grab(out.k_feat)),
            v: qk.then(|| grab(v)),
        });
    }

    /// `‖h_t^l‖` for every position of hidden state `l` (0 = embeddings).
    pub fn hidden_norms(&self, l: usize) -> Option<Vec<f64>> {
        self.hidden.get(l).map(Tensor::row_norms)
    }

    pub fn head(&self, layer: usize, head: usize) -> Option<&HeadTrace> {
        self.layers.get(layer)?.heads.get(head)
    }
}

impl HeadTrace {
    /// Scores restricted to real-token columns.
    pub fn token_scores(&self, slot_cols: usize) -> Tensor<f64> {
        if slot_cols == 0 {
            return self.scores.clone();
        }
        let (rows, cols) = (self.scores.rows(), self.scores.cols() - slot_cols);
        let data = (0..rows)
            .flat_map(|r| self.scores.row(r)[slot_cols..].to_vec())
            .collect();
        Tensor::matrix(rows, cols, data).expect("shape arithmetic")
    }
}
