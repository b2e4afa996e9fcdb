//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1-11 run twice with identical seeds; criterion 12 compares the
//! two passes bit for bit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sinklab_cli::commands;
use sinklab_cli::ExperimentConfig;
use sinklab_core::analysis::{self, OracleInput, OracleRow};
use sinklab_core::attention::{
    attend, AttentionOp, AttentionVariant, BiasKind, BiasScheme, FixedValue, HeadState, Kernel, MaskKind,
};
use sinklab_core::data::{self, BosPolicy, ChunkStream, CorpusKind, Vocab};
use sinklab_core::model::{Capture, Model, ModelConfig, NormPlacement, Params};
use sinklab_core::positional::PeKind;
use sinklab_core::tensor::{CoordinateSelection, GradCheckOptions};
use sinklab_core::train::{self, OptimizerKind, TrainConfig, TrainState};
use sinklab_core::{Result, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
    /// Bit patterns of every number the criterion computed.
    fingerprint: Vec<u64>,
}

impl Outcome {
    fn new(pass: bool, detail: String, fingerprint: Vec<u64>) -> Self {
        Self {
            pass,
            detail,
            fingerprint,
        }
    }
}

fn bits(values: impl IntoIterator<Item = f64>) -> Vec<u64> {
    values.into_iter().map(f64::to_bits).collect()
}

fn attention_only() -> Capture {
    Capture {
        attention: true,
        ..Capture::NONE
    }
}

fn stream(vocab: usize, context: usize, tokens: usize, seed: u64) -> ChunkStream {
    let v = Vocab::new(vocab).unwrap();
    let corpus = CorpusKind::Markov {
        order: 2,
        alphabet: 32,
        branching: 4,
    };
    let docs = data::synth_corpus(&corpus, tokens, 64, seed, v).unwrap();
    data::pack(&docs, context, BosPolicy::WithoutBos, v).unwrap()
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: Vocab) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..vocab.data_tokens())).collect()
}

// 1. Gradient matrix over a pairwise covering set.

#[derive(Clone, Copy, Debug)]
struct GridPoint {
    placement: NormPlacement,
    pe: PeKind,
    variant: AttentionVariant,
    bias: BiasKind,
}

fn covering_set() -> Vec<GridPoint> {
    let placements = [NormPlacement::PreNorm, NormPlacement::PostNorm];
    let pes = [
        PeKind::NoPe,
        PeKind::Absolute,
        PeKind::Learnable,
        PeKind::relative_t5(),
        PeKind::Alibi,
        PeKind::Rotary,
    ];
    let variants = [
        AttentionVariant::SoftmaxExp,
        AttentionVariant::SigmoidNoNorm,
        AttentionVariant::SigmoidNormalized,
        AttentionVariant::EluPlusOneNoNorm,
        AttentionVariant::LinearEluKernelNormalized,
        AttentionVariant::MlpKernelAbsClamped,
    ];
    let biases = [
        BiasKind::None,
        BiasKind::SinkToken,
        BiasKind::KvBiases,
        BiasKind::KBiases {
            fixed_v: FixedValue::Zeros,
            learnable_dims: None,
        },
        BiasKind::VBiases,
    ];
    let sizes = [placements.len(), pes.len(), variants.len(), biases.len()];
    let mut all = Vec::new();
    for a in 0..sizes[0] {
        for b in 0..sizes[1] {
            for c in 0..sizes[2] {
                for d in 0..sizes[3] {
                    all.push([a, b, c, d]);
                }
            }
        }
    }
    let pairs_of = |p: &[usize; 4]| {
        let mut out = Vec::new();
        for i in 0..4 {
            for j in i + 1..4 {
                out.push((i, p[i], j, p[j]));
            }
        }
        out
    };
    let mut uncovered: std::collections::BTreeSet<_> = all.iter().flat_map(pairs_of).collect();
    let mut chosen = Vec::new();
    while !uncovered.is_empty() {
        let best = all
            .iter()
            .max_by_key(|p| {
                let gain = pairs_of(p).iter().filter(|q| uncovered.contains(q)).count();
                // earliest candidate wins ties
                (gain, std::cmp::Reverse(**p))
            })
            .copied()
            .unwrap();
        for q in pairs_of(&best) {
            uncovered.remove(&q);
        }
        chosen.push(best);
    }
    chosen
        .into_iter()
        .map(|[a, b, c, d]| GridPoint {
            placement: placements[a],
            pe: pes[b],
            variant: variants[c],
            bias: biases[d],
        })
        .collect()
}

fn gradient_matrix() -> Outcome {
    let points = covering_set();
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let mut failures = Vec::new();
    let (mut checked, mut skipped) = (0, 0);
    let mut fp = Vec::new();
    let start = Instant::now();
    for (n, p) in points.iter().enumerate() {
        let cfg = ModelConfig {
            d: 32,
            layers: 2,
            heads: 2,
            d_ffn: 64,
            vocab: 32,
            context: 16,
            pe: p.pe,
            norm_placement: p.placement,
            attention: AttentionOp::new(p.variant),
            bias: BiasScheme::new(p.bias),
            seed: n as u64,
            ..Default::default()
        };
        let model = Model::<f64>::init(cfg).unwrap();
        let vocab = Vocab::new(32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + n as u64);
        let seqs: Vec<Vec<usize>> = (0..2)
            .map(|_| {
                let mut s = random_tokens(&mut rng, 16, vocab);
                if p.bias == BiasKind::SinkToken {
                    s[0] = vocab.sink();
                }
                s
            })
            .collect();
        let batch: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        let opts = GradCheckOptions {
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-6,
            coordinates: CoordinateSelection::Sample {
                per_tensor: 8,
                seed: n as u64,
            },
        };
        match train::model_grad_check(&model, &batch, &opts) {
            Ok(r) => {
                fp.push(r.max_relative_error.to_bits());
                checked += r.coordinates_checked;
                skipped += r.coordinates_skipped;
                if r.max_relative_error > worst {
                    worst = r.max_relative_error;
                    worst_at = format!("{p:?}");
                }
                if !r.passed {
                    failures.push(format!("{p:?}: {:.2e}", r.max_relative_error));
                }
            }
            Err(e) => failures.push(format!("{p:?}: {e}")),
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && points.len() >= 30 && elapsed < Duration::from_secs(600);
    let mut detail = format!(
        "{} configs, {checked} coordinates ({skipped} straddling a kink skipped), max rel err {worst:.2e}, {:.1}s",
        points.len(),
        elapsed.as_secs_f64()
    );
    if !failures.is_empty() {
        detail.push_str(&format!("; failing: {}", failures.join(" | ")));
    } else if !worst_at.is_empty() {
        detail.push_str(&format!("; worst {worst_at}"));
    }
    Outcome::new(pass, detail, fp)
}

// 2-4. Closed-form repeated-token attention.

fn repeated_scores(model: &Model<f64>, t: usize) -> Vec<Vec<Tensor<f64>>> {
    let (_, trace) = model.forward(&vec![7; t], Capture::ALL).unwrap();
    trace
        .layers
        .iter()
        .map(|l| l.heads.iter().map(|h| h.token_scores(trace.slot_cols)).collect())
        .collect()
}

fn uniform_repeated() -> Outcome {
    let model = Model::<f64>::init(ModelConfig {
        pe: PeKind::NoPe,
        ..Default::default()
    })
    .unwrap();
    let mut worst = 0.0f64;
    let mut fp = Vec::new();
    for t in [2, 4, 8, 16, 64] {
        for layer in repeated_scores(&model, t) {
            for s in layer {
                for i in 0..t {
                    for j in 0..t {
                        let want = if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 };
                        worst = worst.max((s.get(i, j) - want).abs());
                    }
                }
                fp.extend(bits(s.data().iter().copied()));
            }
        }
    }
    Outcome::new(worst < 1e-5, format!("max |A - 1/t| = {worst:.2e}"), fp)
}

fn exact_row(pe: PeKind, input: &OracleInput, t: usize) -> Vec<f64> {
    match analysis::oracle_repeated(pe, input, t).unwrap() {
        OracleRow::Exact(r) => r,
        OracleRow::Bound(_) => unreachable!(),
    }
}

fn relative_and_alibi() -> Outcome {
    let t = 64;
    let pe = PeKind::relative_t5();
    let PeKind::RelativeT5 { buckets, .. } = pe else { unreachable!() };
    let base = ModelConfig {
        pe,
        heads: 4,
        ..Default::default()
    };
    let mut models = vec![Model::<f64>::init(base.clone()).unwrap()];
    // second model: literal bucket values as biases
    let mut literal = Model::<f64>::init(base).unwrap();
    for l in 0..literal.config.layers {
        let table = literal.params.get_mut(&format!("layers.{l}.attn.rel_bias")).unwrap();
        for b in 0..buckets {
            for h in 0..table.cols() {
                table.set(b, h, b as f64);
            }
        }
    }
    models.push(literal);
    let mut t5_err = 0.0f64;
    let mut fp = Vec::new();
    for model in &models {
        for (l, layer) in repeated_scores(model, t).into_iter().enumerate() {
            let table = model.params.get(&format!("layers.{l}.attn.rel_bias")).unwrap();
            for (h, s) in layer.iter().enumerate() {
                let column: Vec<f64> = (0..buckets).map(|b| table.get(b, h)).collect();
                for i in 1..=t {
                    let want = exact_row(pe, &OracleInput::RelativeTable(column.clone()), i);
                    for (j, w) in want.iter().enumerate() {
                        t5_err = t5_err.max((s.get(i - 1, j) - w).abs());
                    }
                }
                fp.extend(bits(s.data().iter().copied()));
            }
        }
    }
    let heads = 8;
    let alibi = Model::<f64>::init(ModelConfig {
        pe: PeKind::Alibi,
        heads,
        ..Default::default()
    })
    .unwrap();
    let mut monotone = true;
    let mut alibi_err = 0.0f64;
    for layer in repeated_scores(&alibi, t) {
        for (h, s) in layer.iter().enumerate() {
            for i in 1..=t {
                let row = &s.row(i - 1)[..i];
                monotone &= row.windows(2).all(|w| w[0] < w[1]);
                let want = exact_row(PeKind::Alibi, &OracleInput::Alibi { head: h + 1, heads }, i);
                for (a, b) in row.iter().zip(&want) {
                    alibi_err = alibi_err.max((a - b).abs());
                }
            }
            fp.extend(bits(s.data().iter().copied()));
        }
    }
    Outcome::new(
        t5_err < 1e-5 && monotone,
        format!(
            "relative max err {t5_err:.2e}; alibi rows strictly increasing: {monotone} (oracle err {alibi_err:.2e})"
        ),
        fp,
    )
}

fn rotary_bound() -> Outcome {
    let t = 128;
    let mut worst_margin = f64::NEG_INFINITY;
    let mut fp = Vec::new();
    for (seed, init_std) in [(0u64, 0.02), (1, 0.3), (2, 1.0)] {
        let model = Model::<f64>::init(ModelConfig {
            pe: PeKind::Rotary,
            context: t,
            init_std,
            seed,
            ..Default::default()
        })
        .unwrap();
        let (_, trace) = model.forward(&vec![11; t], Capture::ALL).unwrap();
        for layer in &trace.layers {
            for head in &layer.heads {
                let (q, k) = (head.q.as_ref().unwrap(), head.k.as_ref().unwrap());
                let qn = q.row_norms().into_iter().fold(0.0, f64::max);
                let kn = k.row_norms().into_iter().fold(0.0, f64::max);
                let xi = qn * kn / (q.cols() as f64).sqrt();
                let s = head.token_scores(trace.slot_cols);
                for i in 1..=t {
                    let bound = analysis::rotary_bound(xi, i);
                    for j in 0..i {
                        worst_margin = worst_margin.max(s.get(i - 1, j) - bound);
                    }
                }
                fp.push(xi.to_bits());
                fp.extend(bits(s.data().iter().copied()));
            }
        }
    }
    Outcome::new(
        worst_margin <= 1e-5,
        format!("max score - bound = {worst_margin:.2e}"),
        fp,
    )
}

// 5. Metric oracle.

fn brute_alpha(a: &[f64], l: usize, h: usize, t: usize, k: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; h]; l];
    for (li, row) in out.iter_mut().enumerate() {
        for (hi, cell) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for i in k..=t {
                s += a[((li * h + hi) * t + (i - 1)) * t + (k - 1)];
            }
            *cell = s / (t - k + 1) as f64;
        }
    }
    out
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    let mut fp = Vec::new();
    for _ in 0..1000 {
        let (l, h, t) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=16));
        let mut a = vec![0.0; l * h * t * t];
        for block in a.chunks_mut(t * t) {
            for i in 0..t {
                let peaked = rng.random_bool(0.3);
                let w: Vec<f64> = (0..=i)
                    .map(|j| {
                        let x: f64 = rng.random();
                        if peaked && j == 0 {
                            x + 5.0
                        } else {
                            x
                        }
                    })
                    .collect();
                let z: f64 = w.iter().sum();
                for (j, x) in w.iter().enumerate() {
                    block[i * t + j] = x / z;
                }
            }
        }
        let stack = Tensor::new(vec![l, h, t, t], a.clone()).unwrap();
        let k = rng.random_range(1..=t);
        let eps: f64 = rng.random_range(0.01..0.99);
        let want = brute_alpha(&a, l, h, t, k);
        let got = analysis::alpha_scores(&stack, k).unwrap();
        let above = want.iter().flatten().filter(|&&x| x > eps).count();
        let want_sink = above as f64 / (l * h) as f64;
        let got_sink = analysis::sink_metric(&stack, k, eps).unwrap();
        if got != want || got_sink != want_sink {
            mismatches += 1;
        }
        fp.extend(bits(got.into_iter().flatten()));
        fp.push(got_sink.to_bits());
    }
    let t = 64;
    let mut uniform = vec![0.0; t * t];
    for i in 0..t {
        for j in 0..=i {
            uniform[i * t + j] = 1.0 / (i + 1) as f64;
        }
    }
    let stack = Tensor::new(vec![1, 1, t, t], uniform).unwrap();
    let alpha = analysis::alpha_scores(&stack, 1).unwrap()[0][0];
    let harmonic: f64 = (1..=t).map(|i| 1.0 / i as f64).sum::<f64>() / t as f64;
    let sink = analysis::sink_metric(&stack, 1, 0.3).unwrap();
    let pass = mismatches == 0 && sink == 0.0 && (alpha - harmonic).abs() < 1e-12;
    fp.push(alpha.to_bits());
    Outcome::new(
        pass,
        format!("{mismatches}/1000 mismatches; uniform T=64: alpha_1 = {alpha:.5} (H_64/64 = {harmonic:.5}), sink = {sink}"),
        fp,
    )
}

// 6. Normalization-scale output law.

fn scale_law() -> Outcome {
    let (t, d_h) = (12, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut rand_t = |rows, cols| {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::<f64>::matrix(rows, cols, data).unwrap()
    };
    let (q, k, v) = (rand_t(t, d_h), rand_t(t, d_h), rand_t(t, d_h));
    let kernel = (rand_t(d_h, 16), rand_t(16, d_h));
    let mut worst = 0.0f64;
    let mut names = Vec::new();
    let mut fp = Vec::new();
    let pes = [PeKind::NoPe, PeKind::Alibi, PeKind::Rotary];
    for variant in AttentionVariant::ALL.into_iter().filter(|v| v.is_normalized()) {
        names.push(format!("{variant:?}"));
        let state = HeadState {
            kernel: (variant.kernel() == Kernel::Mlp).then(|| kernel.clone()),
            ..Default::default()
        };
        for pe in pes {
            let run = |alpha: f64| {
                let op = AttentionOp::new(variant).with_scale(alpha);
                attend(&q, &k, &v, &op, &BiasScheme::default(), &state, MaskKind::Causal, pe, 1, 2)
                    .unwrap()
                    .output
            };
            let base = run(1.0);
            for alpha in [0.5, 2.0, 3.7] {
                let scaled = run(alpha);
                for (a, b) in scaled.data().iter().zip(base.data()) {
                    worst = worst.max((a - alpha * b).abs());
                }
                fp.extend(bits(scaled.data().iter().copied()));
            }
        }
    }
    Outcome::new(
        worst < 1e-6 && !names.is_empty(),
        format!("max |out(a) - a*out(1)| = {worst:.2e} over {}", names.join(", ")),
        fp,
    )
}

// 7. Scale / learning-rate equivalence.

fn small_config() -> ModelConfig {
    ModelConfig {
        d: 32,
        layers: 2,
        heads: 2,
        d_ffn: 64,
        vocab: 64,
        context: 16,
        ..Default::default()
    }
}

fn scale_lr_equivalence() -> Outcome {
    let data = stream(64, 16, 4000, 7);
    let cfg = TrainConfig {
        steps: 10,
        warmup_steps: 1,
        peak_lr: 0.05,
        min_lr: 0.005,
        batch_chunks: 4,
        weight_decay: 0.0,
        optimizer: OptimizerKind::Sgd,
        seed: 7,
        ..Default::default()
    };
    let mut worst = 0.0f64;
    let mut fp = Vec::new();
    let mut parts = Vec::new();
    for alpha in [0.5, 2.0] {
        match train::scale_equivalence_check(&small_config(), &cfg, alpha, 10, &data) {
            Ok(r) => {
                worst = worst.max(r.max_divergence);
                parts.push(format!("alpha {alpha}: {:.2e}", r.max_divergence));
                fp.extend(bits(r.divergence.iter().chain(&r.other_divergence).copied()));
            }
            Err(e) => {
                worst = f64::INFINITY;
                parts.push(format!("alpha {alpha}: {e}"));
            }
        }
    }
    Outcome::new(worst < 1e-8, format!("per-step divergence {}", parts.join(", ")), fp)
}

// 8. Mask laws.

fn mask_laws() -> Outcome {
    let (t, w, p) = (16, 4, 5);
    let vocab = Vocab::new(64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tokens = random_tokens(&mut rng, t, vocab);
    let mut problems = Vec::new();
    let mut fp = Vec::new();
    for variant in [AttentionVariant::SoftmaxExp, AttentionVariant::SigmoidNoNorm] {
        let model = Model::<f64>::init(ModelConfig {
            mask: MaskKind::Window { w },
            attention: AttentionOp::new(variant),
            ..small_config()
        })
        .unwrap();
        let (_, trace) = model.forward(&tokens, attention_only()).unwrap();
        for layer in &trace.layers {
            for head in &layer.heads {
                let s = head.token_scores(trace.slot_cols);
                for i in 1..=t {
                    let row = s.row(i - 1);
                    let nonzero = row.iter().filter(|&&x| x != 0.0).count();
                    if nonzero > w || (row[0] != 0.0) != (i <= w) {
                        problems.push(format!("{variant:?} window row {i}"));
                    }
                }
                fp.extend(bits(s.data().iter().copied()));
            }
        }
    }
    let prefix = MaskKind::prefix(p);
    let scored = train::loss_targets(&tokens, prefix).iter().filter(|x| x.is_some()).count();
    if scored != t - p {
        problems.push(format!("prefix scores {scored} positions, expected {}", t - p));
    }
    let model = Model::<f64>::init(ModelConfig {
        mask: prefix,
        ..small_config()
    })
    .unwrap();
    let (logits, trace) = model.forward(&tokens, attention_only()).unwrap();
    let base = train::ar_loss(&logits, &tokens, prefix).unwrap();
    let mut perturbed = logits.clone();
    for r in 0..p - 1 {
        for c in 0..perturbed.cols() {
            perturbed.set(r, c, 100.0 * (c as f64).sin());
        }
    }
    if train::ar_loss(&perturbed, &tokens, prefix).unwrap() != base {
        problems.push("prefix loss depends on unscored rows".into());
    }
    for layer in &trace.layers {
        for head in &layer.heads {
            let s = head.token_scores(trace.slot_cols);
            for i in 1..=p {
                let row = s.row(i - 1);
                if !(row[..p].iter().all(|&x| x > 0.0) && row[p..].iter().all(|&x| x == 0.0)) {
                    problems.push(format!("prefix row {i}"));
                }
            }
        }
    }
    fp.push(base.to_bits());
    Outcome::new(
        problems.is_empty(),
        if problems.is_empty() {
            format!("window w={w}, prefix p={p} of C={t}: {scored} scored positions")
        } else {
            problems.join("; ")
        },
        fp,
    )
}

// 9. Bias equivalences.

fn copy_params(from: &Params<f64>, to: &mut Params<f64>) {
    for (i, spec) in to.specs().to_vec().iter().enumerate() {
        let value = match from.get(&spec.name) {
            Some(t) => t.clone(),
            None => Tensor::zeros(&spec.shape),
        };
        to.tensors_mut()[i] = value;
    }
}

fn bias_equivalences() -> Outcome {
    let mut problems = Vec::new();
    let mut fp = Vec::new();
    let k_only = ModelConfig {
        bias: BiasScheme::new(BiasKind::KBiases {
            fixed_v: FixedValue::Zeros,
            learnable_dims: None,
        }),
        ..small_config()
    };
    let a = Model::<f64>::init(k_only.clone()).unwrap();
    let generic_cfg = ModelConfig {
        bias: BiasScheme::new(BiasKind::KvBiases),
        ..k_only
    };
    let mut generic = Model::<f64>::init(generic_cfg).unwrap();
    copy_params(&a.params, &mut generic.params);
    let vocab = Vocab::new(64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let seqs: Vec<Vec<usize>> = (0..3).map(|_| random_tokens(&mut rng, 16, vocab)).collect();
    for s in &seqs {
        let (la, _) = a.forward(s, Capture::NONE).unwrap();
        let (lb, _) = generic.forward(s, Capture::NONE).unwrap();
        if la != lb {
            problems.push("K-bias logits differ from the generic form".into());
        }
        fp.extend(bits(la.data().iter().copied()));
    }
    let batch: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    let (loss_a, ga) = train::loss_and_grads(&a, &batch).unwrap();
    let (loss_b, gb) = train::loss_and_grads(&generic, &batch).unwrap();
    if loss_a != loss_b {
        problems.push("losses differ".into());
    }
    for (i, spec) in a.params.specs().iter().enumerate() {
        let j = generic.params.position(&spec.name).unwrap();
        if ga[i] != gb[j] {
            problems.push(format!("gradient of {} differs", spec.name));
        }
    }

    let cfg = small_config();
    let (d_h, d_a) = (cfg.head_dim(), cfg.head_dim() / 2);
    let pinned_cfg = ModelConfig {
        bias: BiasScheme::new(BiasKind::KBiases {
            fixed_v: FixedValue::Zeros,
            learnable_dims: Some(d_a),
        }),
        ..cfg
    };
    let data = stream(64, 16, 6000, 9);
    let train_cfg = TrainConfig {
        steps: 100,
        warmup_steps: 10,
        peak_lr: 3e-3,
        min_lr: 3e-4,
        batch_chunks: 4,
        seed: 9,
        ..Default::default()
    };
    let mut state = TrainState::new(Model::<f64>::init(pinned_cfg).unwrap(), 9);
    let initial = state.model.params.get("layers.0.attn.k_bias").unwrap().clone();
    for _ in 0..100 {
        state.train_step(&data, &train_cfg).unwrap();
    }
    let learned = state.model.params.get("layers.0.attn.k_bias").unwrap();
    if learned.cols() != d_a || learned == &initial {
        problems.push("restricted key bias did not train".into());
    }
    let (_, trace) = state.model.forward(&seqs[0], Capture::ALL).unwrap();
    let mut pinned_max = 0.0f64;
    for layer in &trace.layers {
        for head in &layer.heads {
            let slot = head.k.as_ref().unwrap().row(0);
            pinned_max = pinned_max.max(slot[d_a..d_h].iter().fold(0.0, |m, x| m.max(x.abs())));
            fp.extend(bits(slot.iter().copied()));
        }
    }
    if pinned_max != 0.0 {
        problems.push(format!("pinned coordinates reached {pinned_max:e}"));
    }
    Outcome::new(
        problems.is_empty(),
        if problems.is_empty() {
            format!("bit-identical logits and gradients; {} of {d_h} key dims pinned at 0 after 100 steps", d_h - d_a)
        } else {
            problems.join("; ")
        },
        fp,
    )
}

// 10. Hidden-state collapse on repeated tokens.

fn collapse() -> Outcome {
    let t = 32;
    let mut parts = Vec::new();
    let mut pass = true;
    let mut fp = Vec::new();
    for (pe, collapses) in [
        (PeKind::NoPe, true),
        (PeKind::relative_t5(), true),
        (PeKind::Alibi, true),
        (PeKind::Rotary, true),
        (PeKind::Absolute, false),
        (PeKind::Learnable, false),
    ] {
        let model = Model::<f64>::init(ModelConfig {
            pe,
            context: 64,
            ..Default::default()
        })
        .unwrap();
        let (_, trace) = model.forward(&vec![3; t], Capture::ALL).unwrap();
        let mut spread = Vec::new();
        for h in &trace.hidden[1..] {
            let first = h.row(0);
            let n0 = first.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dev = (1..t)
                .map(|i| {
                    h.row(i)
                        .iter()
                        .zip(first)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                        / n0
                })
                .fold(0.0, f64::max);
            spread.push(dev);
        }
        let ok = if collapses {
            spread.iter().all(|&d| d < 1e-5)
        } else {
            spread.iter().all(|&d| d > 1e-3)
        };
        pass &= ok;
        let shown = spread.iter().map(|d| format!("{d:.1e}")).collect::<Vec<_>>().join("/");
        parts.push(format!("{} {shown}", pe.name()));
        fp.extend(bits(spread));
    }
    Outcome::new(pass, format!("max relative spread per layer: {}", parts.join(", ")), fp)
}

// 11. Desk-scale run.

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn desk_run(dir: &Path) -> (Outcome, BTreeMap<PathBuf, Vec<u8>>) {
    let cfg = ExperimentConfig::default();
    let start = Instant::now();
    let result: Result<_> = (|| {
        let summary = commands::run_train(&cfg, Some(dir), &mut |_| {})?;
        let report = commands::run_report(&[dir.to_path_buf()], true, None)?;
        Ok((summary, report))
    })();
    let elapsed = start.elapsed();
    let (summary, report) = match result {
        Ok(x) => x,
        Err(e) => return (Outcome::new(false, format!("run failed: {e}"), Vec::new()), BTreeMap::new()),
    };
    let mut problems = Vec::new();
    let timeline = &summary.timeline;
    let valid = timeline.rows.last().map_or(f64::INFINITY, |r| r.valid_loss);
    if valid >= 259f64.ln() {
        problems.push(format!("valid loss {valid:.3} >= ln 259"));
    }
    let csv = std::fs::read_to_string(dir.join(train::TIMELINE_FILE)).unwrap_or_default();
    let header_ok = csv.lines().next().is_some_and(|h| h.split(',').any(|c| c == "sink_1"));
    let sinks_ok = !timeline.rows.is_empty()
        && timeline.eps == 0.3
        && timeline.rows.iter().all(|r| r.sinks.len() == 1 && r.sinks[0].is_finite());
    if !header_ok || !sinks_ok {
        problems.push("timeline lacks a sink_1 value per eval".into());
    }
    let loss_svg = std::fs::read_to_string(report.out_dir.join("loss.svg")).unwrap_or_default();
    let points = loss_svg.matches(r#"class="point""#).count();
    if points != 2 * timeline.rows.len() || !report.out_dir.join("sink.svg").is_file() {
        problems.push("report did not render".into());
    }
    if elapsed > Duration::from_secs(1800) {
        problems.push("slower than 30 minutes".into());
    }
    let last = timeline.rows.last();
    let detail = format!(
        "{} evals in {:.0}s; final valid loss {valid:.3} (ln 259 = {:.3}), sink_1 {:.3}{}",
        timeline.rows.len(),
        elapsed.as_secs_f64(),
        259f64.ln(),
        last.map_or(f64::NAN, |r| r.sinks[0]),
        if problems.is_empty() {
            String::new()
        } else {
            format!("; {}", problems.join("; "))
        }
    );
    (Outcome::new(problems.is_empty(), detail, Vec::new()), files_under(dir))
}

type Criterion = (&'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    ("gradient matrix", gradient_matrix),
    ("uniform attention on repeated tokens (NoPE)", uniform_repeated),
    ("relative-bias rows and ALiBi monotonicity", relative_and_alibi),
    ("rotary repeated-token bound", rotary_bound),
    ("metric oracle", metric_oracle),
    ("normalization-scale output law", scale_law),
    ("scale / learning-rate equivalence", scale_lr_equivalence),
    ("mask laws", mask_laws),
    ("bias equivalences", bias_equivalences),
    ("repeated-token hidden-state collapse", collapse),
];

fn line(n: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {n:>2} {:<4} {name}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().unwrap();
    let mut first = Vec::new();
    let mut all_pass = true;
    println!("acceptance suite");
    for (i, (name, f)) in CRITERIA.iter().enumerate() {
        let o = f();
        line(i + 1, name, o.pass, &o.detail);
        all_pass &= o.pass;
        first.push(o.fingerprint);
    }
    let (desk, desk_files) = desk_run(&tmp.path().join("desk_a"));
    line(11, "desk-scale run", desk.pass, &desk.detail);
    all_pass &= desk.pass;

    let mut differing = Vec::new();
    for (i, ((name, f), fp)) in CRITERIA.iter().zip(&first).enumerate() {
        if f().fingerprint != *fp {
            differing.push(format!("{} ({name})", i + 1));
        }
    }
    let (_, again) = desk_run(&tmp.path().join("desk_b"));
    if again != desk_files || desk_files.is_empty() {
        let files: Vec<String> = desk_files
            .iter()
            .filter(|(p, b)| again.get(*p) != Some(*b))
            .map(|(p, _)| p.display().to_string())
            .collect();
        differing.push(format!("11 ({})", files.join(", ")));
    }
    let det = differing.is_empty();
    line(
        12,
        "determinism",
        det,
        &if det {
            format!("second pass bit-identical ({} desk artifacts compared)", desk_files.len())
        } else {
            format!("differs: {}", differing.join(", "))
        },
    );
    all_pass &= det;
    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
