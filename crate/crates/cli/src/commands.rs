//! Command implementations shared by the binary and the tests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sinklab_core::analysis::{self, ActivationReport, Aggregation, OracleInput, OracleRow, QkGrid, SinkReport};
use sinklab_core::attention::BiasKind;
use sinklab_core::data::{self, ChunkStream, ProbeKind, Vocab};
use sinklab_core::model::{write_atomic, Capture, Checkpoint, Model};
use sinklab_core::positional::PeKind;
use sinklab_core::train::{self, RunOptions, Timeline, TimelineRow, TIMELINE_FILE};
use sinklab_core::{Error, Precision, Result, Scalar};

use crate::config::{ExperimentConfig, MetricSpec, ProbeSpec};
use crate::svg::{Heatmap, LineChart, Series};

pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_FILE: &str = "run.json";

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    pub name: String,
    pub precision: Precision,
    pub flagged_unstable: bool,
    pub warnings: Vec<String>,
    pub parameters: usize,
    pub train_chunks: usize,
    pub steps: usize,
    pub final_eval: Option<TimelineRow>,
}

/// Outcome of a training command.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub record: RunRecord,
    pub timeline: Timeline,
}

/// Loads a config file and applies environment overrides.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply_overrides(|k| std::env::var(k).ok())?;
    Ok(cfg)
}

/// Trains, writes the run directory and runs the configured probes.
///
/// `progress` receives human-readable status lines.
pub fn run_train(cfg: &ExperimentConfig, out: Option<&Path>, progress: &mut dyn FnMut(&str)) -> Result<TrainSummary> {
    let warnings = cfg.validate()?;
    let flagged = cfg.flagged_unstable();
    for w in &warnings {
        progress(&format!("warning: {w}"));
    }
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output.dir.clone());
    create_dir(&out_dir)?;
    write_text(&out_dir.join(CONFIG_FILE), &cfg.to_toml()?)?;
    let stream = cfg.data.build(cfg.model.context, cfg.model.vocab)?;
    progress(&format!("{} chunks of {} tokens", stream.len(), stream.context));
    match cfg.precision {
        Precision::F32 => train_with::<f32>(cfg, &out_dir, &stream, warnings, flagged, progress),
        Precision::F64 => train_with::<f64>(cfg, &out_dir, &stream, warnings, flagged, progress),
    }
}

fn train_with<F: Scalar>(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    stream: &ChunkStream,
    warnings: Vec<String>,
    flagged: bool,
    progress: &mut dyn FnMut(&str),
) -> Result<TrainSummary> {
    let mut on_eval = |r: &TimelineRow| {
        let mut line = format!(
            "step {} lr {:.3e} train {:.4} valid {:.4}",
            r.step, r.lr, r.train_loss, r.valid_loss
        );
        for (k, s) in cfg.train.eval.ks.iter().zip(&r.sinks) {
            let _ = write!(line, " sink_{k} {s:.3}");
        }
        progress(&line);
    };
    let opts = RunOptions {
        out_dir: Some(out_dir),
        on_eval: Some(&mut on_eval),
    };
    let run = train::train_run::<F>(&cfg.model, &cfg.train, stream, opts)?;
    let (train_split, valid) = stream.split_tail(cfg.train.valid_chunks)?;
    for spec in &cfg.probes {
        let dir = out_dir.join(probe_dir_name(spec));
        let request = ProbeRequest {
            kind: spec.kind,
            n: spec.n,
            t: spec.t,
            seed: spec.seed,
            metrics: cfg.metrics.clone(),
            aggregation: cfg.output.aggregation,
            qk_grids: cfg.output.qk_grids,
        };
        probe_model(&run.state.model, &request, Some(&valid), &dir)?;
        progress(&format!("probe written to {}", dir.display()));
    }
    let record = RunRecord {
        name: cfg.name.clone(),
        precision: cfg.precision,
        flagged_unstable: flagged,
        warnings,
        parameters: run.state.model.params.count(),
        train_chunks: train_split.len(),
        steps: run.state.step,
        final_eval: run.timeline.rows.last().cloned(),
    };
    write_json(&out_dir.join(RUN_FILE), &record)?;
    Ok(TrainSummary {
        out_dir: out_dir.to_path_buf(),
        record,
        timeline: run.timeline,
    })
}

pub fn probe_dir_name(spec: &ProbeSpec) -> String {
    let kind = match spec.kind {
        ProbeKind::Natural => "natural",
        ProbeKind::Random => "random",
        ProbeKind::Repeat => "repeat",
    };
    format!("probe_{kind}_t{}", spec.t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRequest {
    pub kind: ProbeKind,
    pub n: usize,
    pub t: usize,
    pub seed: u64,
    pub metrics: Vec<MetricSpec>,
    pub aggregation: Aggregation,
    pub qk_grids: bool,
}

#[derive(Clone, Debug)]
pub struct ProbeOutput {
    pub sink: SinkReport,
    pub activations: Vec<ActivationReport>,
    pub qk: Option<Vec<QkGrid>>,
}

/// Forward passes on probe sequences; writes `sink_report.json`, `alpha.csv`,
/// `sink.csv`, `activations.json` and optionally `qk.json` into `dir`.
pub fn probe_model<F: Scalar>(
    model: &Model<F>,
    req: &ProbeRequest,
    held_out: Option<&ChunkStream>,
    dir: &Path,
) -> Result<ProbeOutput> {
    let cfg = &model.config;
    let vocab = Vocab::new(cfg.vocab)?;
    let sink = cfg.bias.kind == BiasKind::SinkToken;
    if req.t + usize::from(sink) > cfg.context {
        return Err(Error::Input(format!(
            "probe length {} exceeds context {}",
            req.t, cfg.context
        )));
    }
    if req.n == 0 || req.metrics.is_empty() {
        return Err(Error::Config("probes need n >= 1 and at least one metric".into()));
    }
    let mut seqs = data::probe_sequences(req.kind, req.n, req.t, req.seed, vocab, held_out)?;
    if sink {
        for s in &mut seqs {
            s.insert(0, vocab.sink());
        }
    }
    let mut stacks = Vec::with_capacity(seqs.len());
    let mut activations = Vec::with_capacity(seqs.len());
    let mut degenerate = 0;
    let mut qk = None;
    for (i, s) in seqs.iter().enumerate() {
        let (_, trace) = model.forward(s, Capture::ALL)?;
        let (stack, deg) = analysis::attention_stack(&trace, cfg.attention.variant)?;
        stacks.push(stack);
        degenerate += deg;
        activations.push(analysis::massive_ratio(&trace, cfg.norm_placement)?);
        if i == 0 && req.qk_grids {
            qk = Some(analysis::qk_decompose(&trace)?);
        }
    }
    let metrics: Vec<(usize, f64)> = req.metrics.iter().map(|m| (m.k, m.eps)).collect();
    let report = analysis::sink_report(&stacks, &metrics, req.aggregation, degenerate)?;
    create_dir(dir)?;
    write_json(&dir.join("sink_report.json"), &report)?;
    write_text(&dir.join("alpha.csv"), &report.alpha_csv())?;
    let mut sink_csv = String::from("k,eps,value\n");
    for m in &report.metrics {
        let _ = writeln!(sink_csv, "{},{},{}", m.k, m.eps, m.value);
    }
    write_text(&dir.join("sink.csv"), &sink_csv)?;
    write_json(&dir.join("activations.json"), &activations)?;
    if let Some(grids) = &qk {
        write_json(&dir.join("qk.json"), grids)?;
    }
    Ok(ProbeOutput {
        sink: report,
        activations,
        qk,
    })
}

/// Probe a saved checkpoint. Natural probes regenerate the held-out split from
/// `config` or from the `config.toml` beside the checkpoint.
pub fn run_probe(ckpt: &Path, config: Option<&Path>, req: &ProbeRequest, out: &Path) -> Result<ProbeOutput> {
    let bytes = fs::read(ckpt).map_err(|e| Error::io(ckpt, e))?;
    let held_out = if req.kind == ProbeKind::Natural {
        let path = match config {
            Some(p) => p.to_path_buf(),
            None => ckpt.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE),
        };
        if !path.exists() {
            return Err(Error::Input(format!(
                "natural probes need the run config; {} not found (pass --config)",
                path.display()
            )));
        }
        let cfg = load_config(&path)?;
        let stream = cfg.data.build(cfg.model.context, cfg.model.vocab)?;
        Some(stream.split_tail(cfg.train.valid_chunks)?.1)
    } else {
        None
    };
    match Checkpoint::<f32>::peek_precision(&bytes)? {
        Precision::F32 => {
            let model = Model::from_checkpoint(&Checkpoint::<f32>::from_bytes(&bytes)?)?;
            probe_model(&model, req, held_out.as_ref(), out)
        }
        Precision::F64 => {
            let model = Model::from_checkpoint(&Checkpoint::<f64>::from_bytes(&bytes)?)?;
            probe_model(&model, req, held_out.as_ref(), out)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleRequest {
    pub pe: PeKind,
    pub t_max: usize,
    pub heads: usize,
    pub xi: Vec<f64>,
    /// Source of the relative bias table.
    pub ckpt: Option<PathBuf>,
    pub layer: usize,
}

/// Closed-form repeated-token attention as CSV.
///
/// Exact rows give `head,t,i,score`; the rotary bound gives `xi,t,bound`.
pub fn run_oracle(req: &OracleRequest) -> Result<String> {
    if req.t_max == 0 {
        return Err(Error::Config("t-max must be at least 1".into()));
    }
    let mut out = String::new();
    let exact = |out: &mut String, head: usize, input: &OracleInput| -> Result<()> {
        for t in 1..=req.t_max {
            if let OracleRow::Exact(row) = analysis::oracle_repeated(req.pe, input, t)? {
                for (i, s) in row.iter().enumerate() {
                    let _ = writeln!(out, "{head},{t},{},{s}", i + 1);
                }
            }
        }
        Ok(())
    };
    match req.pe {
        PeKind::NoPe => {
            out.push_str("head,t,i,score\n");
            exact(&mut out, 1, &OracleInput::None)?;
        }
        PeKind::Alibi => {
            out.push_str("head,t,i,score\n");
            for h in 1..=req.heads {
                exact(&mut out, h, &OracleInput::Alibi { head: h, heads: req.heads })?;
            }
        }
        PeKind::RelativeT5 { buckets, .. } => {
            out.push_str("head,t,i,score\n");
            for (h, table) in relative_tables(req, buckets)?.into_iter().enumerate() {
                exact(&mut out, h + 1, &OracleInput::RelativeTable(table))?;
            }
        }
        PeKind::Rotary => {
            out.push_str("xi,t,bound\n");
            for &xi in &req.xi {
                for t in 1..=req.t_max {
                    let _ = writeln!(out, "{xi},{t},{}", analysis::rotary_bound(xi, t));
                }
            }
        }
        other => {
            return Err(Error::Config(format!(
                "no repeated-token closed form for {}",
                other.name()
            )))
        }
    }
    Ok(out)
}

fn relative_tables(req: &OracleRequest, buckets: usize) -> Result<Vec<Vec<f64>>> {
    let Some(path) = &req.ckpt else {
        // Bucket index as its own bias value.
        return Ok(vec![(0..buckets).map(|b| b as f64).collect(); req.heads]);
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (config, table) = match Checkpoint::<f32>::peek_precision(&bytes)? {
        Precision::F32 => {
            let m = Model::from_checkpoint(&Checkpoint::<f32>::from_bytes(&bytes)?)?;
            let t = m.params.get(&format!("layers.{}.attn.rel_bias", req.layer.saturating_sub(1))).map(|t| t.to_f64());
            (m.config, t)
        }
        Precision::F64 => {
            let m = Model::from_checkpoint(&Checkpoint::<f64>::from_bytes(&bytes)?)?;
            let t = m.params.get(&format!("layers.{}.attn.rel_bias", req.layer.saturating_sub(1))).cloned();
            (m.config, t)
        }
    };
    if config.pe != req.pe {
        return Err(Error::Config(format!(
            "checkpoint uses {} positions, not the requested scheme",
            config.pe.name()
        )));
    }
    let table = table.ok_or_else(|| Error::Config(format!("checkpoint has no layer {}", req.layer)))?;
    Ok((0..table.cols())
        .map(|h| (0..table.rows()).map(|b| table.get(b, h)).collect())
        .collect())
}

/// Files produced by the report command.
#[derive(Clone, Debug, Default)]
pub struct ReportSummary {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
}

struct RunArtifacts {
    name: String,
    timeline: Timeline,
    probes: Vec<(String, SinkReport)>,
}

fn collect_run(dir: &Path, missing: &mut Vec<PathBuf>) -> Result<Option<RunArtifacts>> {
    let (cfg_path, tl_path) = (dir.join(CONFIG_FILE), dir.join(TIMELINE_FILE));
    let mut ok = true;
    for p in [&cfg_path, &tl_path] {
        if !p.is_file() {
            missing.push(p.clone());
            ok = false;
        }
    }
    if !ok {
        return Ok(None);
    }
    let cfg = ExperimentConfig::load(&cfg_path)?;
    let text = fs::read_to_string(&tl_path).map_err(|e| Error::io(&tl_path, e))?;
    let timeline = Timeline::from_csv(&text, cfg.train.eval.eps)?;
    let mut probes = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("sink_report.json").is_file())
        .collect();
    entries.sort();
    for p in entries {
        let file = p.join("sink_report.json");
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let report: SinkReport =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", file.display())))?;
        let label = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        probes.push((label, report));
    }
    Ok(Some(RunArtifacts {
        name: cfg.name,
        timeline,
        probes,
    }))
}

/// Consolidates one or more run directories into `timelines.csv` and
/// `summary.csv`; with `plots`, also line charts and α heatmaps.
pub fn run_report(runs: &[PathBuf], plots: bool, out: Option<&Path>) -> Result<ReportSummary> {
    if runs.is_empty() {
        return Err(Error::Input("no run directories given".into()));
    }
    let mut missing = Vec::new();
    let mut arts = Vec::new();
    for r in runs {
        if let Some(a) = collect_run(r, &mut missing)? {
            arts.push(a);
        }
    }
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|p| format!("  {}", p.display())).collect();
        return Err(Error::Input(format!("missing artifacts:\n{}", list.join("\n"))));
    }
    let mut seen: Vec<String> = Vec::new();
    for a in &mut arts {
        let base = a.name.clone();
        let mut n = 2;
        while seen.contains(&a.name) {
            a.name = format!("{base} ({n})");
            n += 1;
        }
        seen.push(a.name.clone());
    }
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| runs[0].join("report"));
    create_dir(&out_dir)?;
    let mut files = Vec::new();
    let mut emit = |name: &str, text: &str| -> Result<()> {
        let p = out_dir.join(name);
        write_text(&p, text)?;
        files.push(p);
        Ok(())
    };

    let mut long = String::from("run,step,series,value\n");
    let mut summary = String::from("run,evals,final_step,final_train_loss,final_valid_loss\n");
    for a in &arts {
        for r in &a.timeline.rows {
            let _ = writeln!(long, "{},{},lr,{}", a.name, r.step, r.lr);
            let _ = writeln!(long, "{},{},train_loss,{}", a.name, r.step, r.train_loss);
            let _ = writeln!(long, "{},{},valid_loss,{}", a.name, r.step, r.valid_loss);
            for (k, s) in a.timeline.ks.iter().zip(&r.sinks) {
                let _ = writeln!(long, "{},{},sink_{k},{s}", a.name, r.step);
            }
        }
        match a.timeline.rows.last() {
            Some(r) => {
                let _ = writeln!(
                    summary,
                    "{},{},{},{},{}",
                    a.name,
                    a.timeline.rows.len(),
                    r.step,
                    r.train_loss,
                    r.valid_loss
                );
            }
            None => {
                let _ = writeln!(summary, "{},0,,,", a.name);
            }
        }
    }
    emit("timelines.csv", &long)?;
    emit("summary.csv", &summary)?;

    if plots {
        let mut loss = LineChart {
            title: "Loss".into(),
            x_label: "step".into(),
            y_label: "loss".into(),
            series: Vec::new(),
        };
        let mut sink = LineChart {
            title: "Attention sink".into(),
            x_label: "step".into(),
            y_label: "sink metric".into(),
            series: Vec::new(),
        };
        for a in &arts {
            let rows = &a.timeline.rows;
            loss.series.push(Series {
                name: format!("{} train", a.name),
                points: rows.iter().map(|r| (r.step as f64, r.train_loss)).collect(),
            });
            loss.series.push(Series {
                name: format!("{} valid", a.name),
                points: rows.iter().map(|r| (r.step as f64, r.valid_loss)).collect(),
            });
            for (i, k) in a.timeline.ks.iter().enumerate() {
                sink.series.push(Series {
                    name: format!("{} sink_{k}", a.name),
                    points: rows.iter().map(|r| (r.step as f64, r.sinks[i])).collect(),
                });
            }
        }
        emit("loss.svg", &loss.render())?;
        emit("sink.svg", &sink.render())?;
        for (ri, a) in arts.iter().enumerate() {
            for (label, report) in &a.probes {
                let mut ks: Vec<usize> = report.alpha.iter().map(|r| r.k).collect();
                ks.dedup();
                for k in ks {
                    let map = Heatmap {
                        title: format!("{} {label} mean alpha_{k}", a.name),
                        row_label: "layer".into(),
                        col_label: "head".into(),
                        grid: report.alpha_grid(k),
                    };
                    emit(&format!("alpha_run{}_{label}_k{k}.svg", ri + 1), &map.render())?;
                }
            }
        }
    }
    Ok(ReportSummary { out_dir, files })
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NumericAbort { .. } | Error::NonFinite { .. } | Error::Overflow { .. } | Error::DegenerateRow { .. } => 3,
        Error::Io { .. } => 4,
        _ => 2,
    }
}
