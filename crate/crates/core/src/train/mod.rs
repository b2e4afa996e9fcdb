//! Auto-regressive loss, optimization and the training loop.

mod optim;
mod timeline;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{clip_grads, decayed_update, global_norm, lr_at, Moments, OptimizerKind};
pub use timeline::{Timeline, TimelineRow};

use crate::analysis::{self, Aggregation};
use crate::attention::{BiasKind, MaskKind};
use crate::data::{self, ChunkStream, InjectedKind, InjectionSpec, ProbeKind, Vocab};
use crate::error::{Error, Result};
use crate::model::{write_atomic, Capture, Checkpoint, Model, ModelConfig, Params};
use crate::tensor::{grad_check_piecewise, GradCheckOptions, GradCheckReport, Scalar, Tape, Tensor};

/// Probe protocol used for the sink columns of the timeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub probe: ProbeKind,
    pub n: usize,
    pub t: usize,
    pub ks: Vec<usize>,
    pub eps: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe: ProbeKind::Natural,
            n: 100,
            t: 64,
            ks: vec![1],
            eps: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub batch_chunks: usize,
    pub weight_decay: f64,
    /// Maximum global gradient norm; off when absent.
    pub grad_clip: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub optimizer: OptimizerKind,
    pub eval_every: usize,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Trailing chunks held out for validation and natural probes.
    pub valid_chunks: usize,
    pub seed: u64,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            warmup_steps: 100,
            peak_lr: 4e-4,
            min_lr: 4e-5,
            batch_chunks: 8,
            weight_decay: 0.1,
            grad_clip: None,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            optimizer: OptimizerKind::AdamW,
            eval_every: 200,
            checkpoint_every: 0,
            valid_chunks: 16,
            seed: 0,
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.steps > 0 && self.warmup_steps >= self.steps {
            return fail(format!(
                "warmup_steps ({}) must be below steps ({})",
                self.warmup_steps, self.steps
            ));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.peak_lr && self.peak_lr.is_finite()) {
            return fail(format!(
                "need 0 <= min_lr <= peak_lr (min_lr={}, peak_lr={})",
                self.min_lr, self.peak_lr
            ));
        }
        if self.batch_chunks == 0 || self.eval_every == 0 || self.valid_chunks == 0 {
            return fail("batch_chunks, eval_every and valid_chunks must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return fail("betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay must be non-negative".into());
        }
        if matches!(self.grad_clip, Some(c) if c <= 0.0) {
            return fail("grad_clip must be positive".into());
        }
        let e = &self.eval;
        if e.n == 0 || e.t == 0 || e.ks.is_empty() || !(e.eps > 0.0 && e.eps < 1.0) {
            return fail("eval needs n >= 1, t >= 1, at least one k and eps in (0, 1)".into());
        }
        if let Some(&k) = e.ks.iter().find(|&&k| k == 0 || k > e.t) {
            return fail(format!("sink position {k} is outside 1..={}", e.t));
        }
        Ok(())
    }
}

/// Target for each logit row: row `r` predicts token `r+1`; rows whose target
/// position precedes the first scored position are unscored.
pub fn loss_targets(tokens: &[usize], mask: MaskKind) -> Vec<Option<usize>> {
    let first = mask.first_scored();
    (0..tokens.len())
        .map(|r| {
            let pos = r + 2;
            (r + 1 < tokens.len() && pos >= first).then(|| tokens[r + 1])
        })
        .collect()
}

/// Mean next-token negative log-likelihood over scored positions.
pub fn ar_loss<F: Scalar>(logits: &Tensor<F>, tokens: &[usize], mask: MaskKind) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy(l, &loss_targets(tokens, mask))?;
    Ok(tape.value(loss).data()[0].f64())
}

/// Mean loss over `batch` and its gradient for every parameter.
pub fn loss_and_grads<F: Scalar>(
    model: &Model<F>,
    batch: &[&[usize]],
) -> Result<(f64, Vec<Tensor<F>>)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let params = model.params.tensors();
    let mut total = vec![Tensor::<F>::zeros(&[0]); 0];
    let mut loss_sum = 0.0;
    for tokens in batch {
        let mut tape = Tape::new();
        let vars = model.register(&mut tape);
        let (logits, _) = model.build(&mut tape, &vars, tokens, Capture::NONE)?;
        let loss = tape.cross_entropy(logits, &loss_targets(tokens, model.config.mask))?;
        loss_sum += tape.value(loss).data()[0].f64();
        let grads = tape.backward(loss, params.len())?;
        if total.is_empty() {
            total = grads
                .into_iter()
                .zip(params)
                .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
        } else {
            for (acc, g) in total.iter_mut().zip(grads) {
                if let Some(g) = g {
                    acc.add_assign(&g)?;
                }
            }
        }
    }
    let n = batch.len() as f64;
    if batch.len() > 1 {
        let inv = F::of(1.0 / n);
        for g in &mut total {
            *g = g.scale(inv);
        }
    }
    Ok((loss_sum / n, total))
}

/// Full-model loss gradient against central finite differences.
///
/// Coordinates whose perturbation flips a rectifier, absolute value or clamp
/// branch are reported as skipped.
pub fn model_grad_check(
    model: &Model<f64>,
    batch: &[&[usize]],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, analytic) = loss_and_grads(model, batch)?;
    let mut probe = model.clone();
    grad_check_piecewise(
        |theta| {
            probe.params.tensors_mut().clone_from_slice(theta);
            let mut total = 0.0;
            let mut signature = 0u64;
            for tokens in batch {
                let mut tape = Tape::new();
                let vars = probe.register(&mut tape);
                let (logits, _) = probe.build(&mut tape, &vars, tokens, Capture::NONE)?;
                let loss = tape.cross_entropy(logits, &loss_targets(tokens, probe.config.mask))?;
                total += tape.value(loss).data()[0];
                signature = signature.rotate_left(17) ^ tape.kink_signature();
            }
            Ok((total / batch.len() as f64, signature))
        },
        &analytic,
        model.params.tensors(),
        opts,
    )
}

/// Parameters, optimizer moments, counters and the batch-sampling RNG.
#[derive(Clone, Debug)]
pub struct TrainState<F> {
    pub model: Model<F>,
    pub moments: Moments<F>,
    pub step: usize,
    pub rng: ChaCha8Rng,
    /// Per-parameter learning-rate multipliers.
    pub lr_scale: Vec<f64>,
    pub loss_sum: f64,
    pub loss_count: usize,
}

#[derive(Serialize, Deserialize)]
struct StateRecord {
    step: usize,
    rng_seed: Vec<u8>,
    rng_word_pos: String,
    lr_scale_bits: Vec<u64>,
    loss_sum_bits: u64,
    loss_count: usize,
}

impl<F: Scalar> TrainState<F> {
    pub fn new(model: Model<F>, seed: u64) -> Self {
        let n = model.params.len();
        Self {
            moments: Moments::zeros_like(model.params.tensors()),
            model,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            lr_scale: vec![1.0; n],
            loss_sum: 0.0,
            loss_count: 0,
        }
    }

    /// Samples `batch_chunks` chunks uniformly with replacement and takes one step.
    pub fn train_step(&mut self, train: &ChunkStream, cfg: &TrainConfig) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::Input("no training chunks".into()));
        }
        let picks: Vec<usize> = (0..cfg.batch_chunks)
            .map(|_| self.rng.random_range(0..train.len()))
            .collect();
        let batch: Vec<&[usize]> = picks.iter().map(|&i| train.chunks[i].as_slice()).collect();
        self.step_on(&batch, cfg)
    }

    /// One optimizer step on an explicit batch.
    pub fn step_on(&mut self, batch: &[&[usize]], cfg: &TrainConfig) -> Result<f64> {
        let (loss, mut grads) = loss_and_grads(&self.model, batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        if let Some(c) = cfg.grad_clip {
            clip_grads(&mut grads, c);
        }
        let step = self.step + 1;
        let lr = lr_at(step, cfg);
        let specs = self.model.params.specs().to_vec();
        decayed_update(
            self.model.params.tensors_mut(),
            &specs,
            &mut self.moments,
            &grads,
            lr,
            &self.lr_scale,
            step,
            cfg,
        )?;
        self.step = step;
        self.loss_sum += loss;
        self.loss_count += 1;
        Ok(loss)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint<F>> {
        let mut ckpt = self.model.to_checkpoint()?;
        let names = ckpt.params.iter().map(|(n, _)| n.clone());
        ckpt.moment1 = names.clone().zip(self.moments.first.iter().cloned()).collect();
        ckpt.moment2 = names.zip(self.moments.second.iter().cloned()).collect();
        let record = StateRecord {
            step: self.step,
            rng_seed: self.rng.get_seed().to_vec(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            lr_scale_bits: self.lr_scale.iter().map(|x| x.to_bits()).collect(),
            loss_sum_bits: self.loss_sum.to_bits(),
            loss_count: self.loss_count,
        };
        ckpt.state = serde_json::to_string(&record).map_err(|e| Error::Format(e.to_string()))?;
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<F>) -> Result<Self> {
        let model = Model::from_checkpoint(ckpt)?;
        let record: StateRecord =
            serde_json::from_str(&ckpt.state).map_err(|e| Error::Format(format!("train state: {e}")))?;
        let n = model.params.len();
        let take = |list: &Vec<(String, Tensor<F>)>| -> Result<Vec<Tensor<F>>> {
            if list.len() != n {
                return Err(Error::Format("optimizer moments do not match parameters".into()));
            }
            Ok(list.iter().map(|(_, t)| t.clone()).collect())
        };
        let seed: [u8; 32] = record
            .rng_seed
            .try_into()
            .map_err(|_| Error::Format("bad RNG seed".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(
            record
                .rng_word_pos
                .parse()
                .map_err(|_| Error::Format("bad RNG position".into()))?,
        );
        if record.lr_scale_bits.len() != n {
            return Err(Error::Format("learning-rate scales do not match parameters".into()));
        }
        Ok(Self {
            moments: Moments {
                first: take(&ckpt.moment1)?,
                second: take(&ckpt.moment2)?,
            },
            model,
            step: record.step,
            rng,
            lr_scale: record.lr_scale_bits.into_iter().map(f64::from_bits).collect(),
            loss_sum: f64::from_bits(record.loss_sum_bits),
            loss_count: record.loss_count,
        })
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TIMELINE_FILE: &str = "timeline.csv";

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Directory receiving `timeline.csv` and `checkpoint.bin`.
    pub out_dir: Option<&'a Path>,
    /// Invoked after every evaluation.
    pub on_eval: Option<&'a mut dyn FnMut(&TimelineRow)>,
}

pub struct RunOutput<F> {
    pub state: TrainState<F>,
    pub timeline: Timeline,
    pub warnings: Vec<String>,
}

fn has_sink_prefix(stream: &ChunkStream) -> bool {
    stream
        .annotations
        .first()
        .and_then(|a| a.first())
        .is_some_and(|a| a.position == 1 && a.kind == InjectedKind::Sink)
}

/// Train and validation splits plus sink probes for a run.
pub struct RunData {
    pub train: ChunkStream,
    pub valid: ChunkStream,
    pub probes: Vec<Vec<usize>>,
}

/// Splits the stream, applies the sink-token transform when the model uses
/// one, and draws the probe sequences.
pub fn prepare_data(model_cfg: &ModelConfig, cfg: &TrainConfig, stream: &ChunkStream) -> Result<RunData> {
    if stream.context > model_cfg.context {
        return Err(Error::Input(format!(
            "chunks of {} tokens exceed model context {}",
            stream.context, model_cfg.context
        )));
    }
    let vocab = Vocab::new(model_cfg.vocab)?;
    let (raw_train, raw_valid) = stream.split_tail(cfg.valid_chunks)?;
    let sink = model_cfg.bias.kind == BiasKind::SinkToken;
    let (train, valid) = if sink && !has_sink_prefix(stream) {
        (
            data::inject(&raw_train, &InjectionSpec::SinkTokenPrepend, 0, vocab)?,
            data::inject(&raw_valid, &InjectionSpec::SinkTokenPrepend, 0, vocab)?,
        )
    } else {
        (raw_train, raw_valid)
    };
    let e = &cfg.eval;
    let mut probes = data::probe_sequences(
        e.probe,
        e.n,
        e.t,
        cfg.seed ^ 0x5eed_0f_9b0b,
        vocab,
        Some(&valid_without_sink(&valid, sink)),
    )?;
    if sink {
        for p in &mut probes {
            if p.first() != Some(&vocab.sink()) {
                p.insert(0, vocab.sink());
            }
        }
    }
    if let Some(p) = probes.iter().find(|p| p.len() > model_cfg.context) {
        return Err(Error::Input(format!(
            "probe length {} exceeds context {}",
            p.len(),
            model_cfg.context
        )));
    }
    Ok(RunData {
        train,
        valid,
        probes,
    })
}

fn valid_without_sink(valid: &ChunkStream, sink: bool) -> ChunkStream {
    if !sink {
        return valid.clone();
    }
    let mut v = valid.clone();
    for c in &mut v.chunks {
        c.remove(0);
    }
    v.context -= 1;
    v
}

/// Validation loss and one sink value per tracked `k`.
pub fn evaluate<F: Scalar>(
    model: &Model<F>,
    valid: &ChunkStream,
    probes: &[Vec<usize>],
    eval: &EvalConfig,
) -> Result<(f64, Vec<f64>)> {
    let mut loss = 0.0;
    for chunk in &valid.chunks {
        let (logits, _) = model.forward(chunk, Capture::NONE)?;
        loss += ar_loss(&logits, chunk, model.config.mask)?;
    }
    let stacks = probe_stacks(model, probes)?;
    let sinks = eval
        .ks
        .iter()
        .map(|&k| analysis::sink_over_sequences(&stacks, k, eval.eps, Aggregation::PerSequence))
        .collect::<Result<Vec<_>>>()?;
    Ok((loss / valid.len() as f64, sinks))
}

/// Real-token attention stacks for each probe.
pub fn probe_stacks<F: Scalar>(model: &Model<F>, probes: &[Vec<usize>]) -> Result<Vec<Tensor<f64>>> {
    let capture = Capture {
        attention: true,
        ..Capture::NONE
    };
    probes
        .iter()
        .map(|p| {
            let (_, trace) = model.forward(p, capture)?;
            analysis::attention_stack(&trace, model.config.attention.variant).map(|(s, _)| s)
        })
        .collect()
}

fn abort(step: usize, err: Error, last_checkpoint: &Option<PathBuf>) -> Error {
    match err {
        Error::NonFinite { .. } | Error::Overflow { .. } | Error::DegenerateRow { .. } => {
            Error::NumericAbort {
                step,
                reason: err.to_string(),
                last_checkpoint: last_checkpoint.clone(),
            }
        }
        other => other,
    }
}

/// Trains from a fresh initialization, evaluating every `eval_every` steps and at the end.
pub fn train_run<F: Scalar>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    stream: &ChunkStream,
    mut opts: RunOptions,
) -> Result<RunOutput<F>> {
    let warnings = model_cfg.validate()?;
    cfg.validate()?;
    let data = prepare_data(model_cfg, cfg, stream)?;
    let mut state = TrainState::new(Model::<F>::init(model_cfg.clone())?, cfg.seed);
    let mut timeline = Timeline::new(cfg.eval.ks.clone(), cfg.eval.eps);
    let ckpt_path = opts.out_dir.map(|d| d.join(CHECKPOINT_FILE));
    let mut last_checkpoint: Option<PathBuf> = None;
    let save = |state: &TrainState<F>, path: &Path| -> Result<()> { state.to_checkpoint()?.save(path) };
    for s in 1..=cfg.steps {
        state
            .train_step(&data.train, cfg)
            .map_err(|e| abort(s, e, &last_checkpoint))?;
        if s % cfg.eval_every == 0 || s == cfg.steps {
            let (valid_loss, sinks) = evaluate(&state.model, &data.valid, &data.probes, &cfg.eval)
                .map_err(|e| abort(s, e, &last_checkpoint))?;
            let row = TimelineRow {
                step: s,
                lr: lr_at(s, cfg),
                train_loss: state.loss_sum / state.loss_count.max(1) as f64,
                valid_loss,
                sinks,
            };
            state.loss_sum = 0.0;
            state.loss_count = 0;
            if let Some(cb) = opts.on_eval.as_mut() {
                cb(&row);
            }
            timeline.rows.push(row);
            if let Some(dir) = opts.out_dir {
                write_atomic(&dir.join(TIMELINE_FILE), timeline.to_csv().as_bytes())?;
            }
        }
        if let Some(path) = &ckpt_path {
            if cfg.checkpoint_every > 0 && s % cfg.checkpoint_every == 0 {
                save(&state, path)?;
                last_checkpoint = Some(path.clone());
            }
        }
    }
    if let Some(dir) = opts.out_dir {
        write_atomic(&dir.join(TIMELINE_FILE), timeline.to_csv().as_bytes())?;
        if let Some(path) = &ckpt_path {
            save(&state, path)?;
        }
    }
    Ok(RunOutput {
        state,
        timeline,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScaleReport {
    pub alpha: f64,
    /// Per step: max relative difference between `α·W_O` of run A and `W_O` of run B.
    pub divergence: Vec<f64>,
    /// Per step: max relative difference over all other parameters.
    pub other_divergence: Vec<f64>,
    pub max_divergence: f64,
}

fn rel_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let scale = b.max_abs().max(f64::MIN_POSITIVE);
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Run A: normalization scale `α`, learning rate `η`, output projection `W_O`.
/// Run B: scale 1, rate `α²η` on the output projection, initialization `α·W_O`.
/// Both see identical batches under plain gradient descent.
pub fn scale_equivalence_check(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    alpha: f64,
    steps: usize,
    stream: &ChunkStream,
) -> Result<ScaleReport> {
    if cfg.optimizer != OptimizerKind::Sgd {
        return Err(Error::Config(
            "the scale equivalence holds for plain gradient descent only".into(),
        ));
    }
    if cfg.weight_decay != 0.0 || cfg.grad_clip.is_some() {
        return Err(Error::Config("disable weight decay and clipping for the equivalence check".into()));
    }
    if !model_cfg.attention.variant.is_normalized() {
        return Err(Error::Config("the normalization scale needs a normalized variant".into()));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    let mut cfg_a = model_cfg.clone();
    cfg_a.attention.norm_scale = model_cfg.attention.norm_scale * alpha;
    let model_a = Model::<f64>::init(cfg_a)?;
    let mut params_b: Params<f64> = model_a.params.clone();
    let wo: Vec<usize> = params_b
        .specs()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.name.ends_with(".attn.wo"))
        .map(|(i, _)| i)
        .collect();
    for &i in &wo {
        let t = &mut params_b.tensors_mut()[i];
        *t = t.scale(alpha);
    }
    let model_b = Model::new(model_cfg.clone(), params_b)?;
    let mut a = TrainState::new(model_a, cfg.seed);
    let mut b = TrainState::new(model_b, cfg.seed);
    for &i in &wo {
        b.lr_scale[i] = alpha * alpha;
    }
    let mut report = ScaleReport {
        alpha,
        divergence: Vec::with_capacity(steps),
        other_divergence: Vec::with_capacity(steps),
        max_divergence: 0.0,
    };
    let n = a.model.params.len();
    for _ in 0..steps {
        a.train_step(stream, cfg)?;
        b.train_step(stream, cfg)?;
        let (pa, pb) = (a.model.params.tensors(), b.model.params.tensors());
        let mut div: f64 = 0.0;
        let mut other: f64 = 0.0;
        for i in 0..n {
            if wo.contains(&i) {
                div = div.max(rel_diff(&pa[i].scale(alpha), &pb[i]));
            } else {
                other = other.max(rel_diff(&pa[i], &pb[i]));
            }
        }
        report.divergence.push(div);
        report.other_divergence.push(other);
        report.max_divergence = report.max_divergence.max(div).max(other);
    }
    Ok(report)
}
