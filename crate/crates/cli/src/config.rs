//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sinklab_core::analysis::Aggregation;
use sinklab_core::data::{self, BosPolicy, ChunkStream, CorpusKind, InjectionSpec, ProbeKind, Vocab};
use sinklab_core::model::ModelConfig;
use sinklab_core::train::TrainConfig;
use sinklab_core::{Error, Precision, Result};

pub const SEED_VAR: &str = "SINKLAB_SEED";
pub const PRECISION_VAR: &str = "SINKLAB_PRECISION";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub corpus: CorpusKind,
    /// Corpus size in tokens (a nonzero value truncates file corpora).
    pub tokens: usize,
    pub doc_len: usize,
    pub bos: BosPolicy,
    pub seed: u64,
    /// Applied in order after packing.
    pub injections: Vec<InjectionSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusKind::default(),
            tokens: 400_000,
            doc_len: 512,
            bos: BosPolicy::WithoutBos,
            seed: 0,
            injections: Vec::new(),
        }
    }
}

impl DataConfig {
    /// Packed and injected chunks of `context` tokens.
    pub fn build(&self, context: usize, vocab: usize) -> Result<ChunkStream> {
        let vocab = Vocab::new(vocab)?;
        let docs = data::synth_corpus(&self.corpus, self.tokens, self.doc_len, self.seed, vocab)?;
        let mut stream = data::pack(&docs, context, self.bos, vocab)?;
        for (i, spec) in self.injections.iter().enumerate() {
            stream = data::inject(&stream, spec, self.seed.wrapping_add(i as u64 + 1), vocab)?;
        }
        Ok(stream)
    }
}

/// A post-training probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSpec {
    pub kind: ProbeKind,
    pub n: usize,
    pub t: usize,
    pub seed: u64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            kind: ProbeKind::Natural,
            n: 100,
            t: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSpec {
    pub k: usize,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub aggregation: Aggregation,
    /// Also write query/key angle-norm grids for the first probe sequence.
    pub qk_grids: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/desk"),
            aggregation: Aggregation::PerSequence,
            qk_grids: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Label used in report legends.
    pub name: String,
    pub precision: Precision,
    /// Suppresses the warning for attention variants known to diverge.
    pub allow_unstable: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub probes: Vec<ProbeSpec>,
    pub metrics: Vec<MetricSpec>,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "desk".into(),
            precision: Precision::F32,
            allow_unstable: false,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            probes: vec![ProbeSpec::default()],
            metrics: vec![MetricSpec { k: 1, eps: 0.3 }],
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical TOML; parsing it yields an equal config.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Applies `SINKLAB_SEED` and `SINKLAB_PRECISION` from `lookup`.
    pub fn apply_overrides(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(s) = lookup(SEED_VAR) {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_VAR} must be an unsigned integer, got `{s}`")))?;
            self.model.seed = seed;
            self.train.seed = seed;
            self.data.seed = seed;
        }
        if let Some(p) = lookup(PRECISION_VAR) {
            self.precision = p.parse()?;
        }
        Ok(())
    }

    /// Checks everything that can be checked before data generation; returns warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = self.model.validate()?;
        self.train.validate()?;
        if self.model.attention.variant.known_unstable() && self.allow_unstable {
            warnings.retain(|w| !w.contains("known to be unstable"));
        }
        for m in &self.metrics {
            if !(m.eps > 0.0 && m.eps < 1.0) {
                return Err(Error::Config(format!("metric threshold {} is outside (0, 1)", m.eps)));
            }
        }
        let extra = usize::from(self.model.bias.kind == sinklab_core::attention::BiasKind::SinkToken);
        for p in self.probes.iter().map(|p| p.t).chain([self.train.eval.t]) {
            if p + extra > self.model.context {
                return Err(Error::Input(format!(
                    "probe length {p} exceeds context {}",
                    self.model.context
                )));
            }
        }
        for p in &self.probes {
            if p.n == 0 {
                return Err(Error::Config("probe n must be at least 1".into()));
            }
            if let Some(m) = self.metrics.iter().find(|m| m.k == 0 || m.k > p.t) {
                return Err(Error::Config(format!("metric k={} is outside 1..={}", m.k, p.t)));
            }
        }
        Ok(warnings)
    }

    /// Whether the run must be flagged as using a known-unstable variant.
    pub fn flagged_unstable(&self) -> bool {
        self.model.attention.variant.known_unstable() && !self.allow_unstable
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = ExperimentConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap().to_toml().unwrap(), text);
    }

    #[test]
    fn partial_files_take_defaults() {
        let c = ExperimentConfig::from_toml("name = \"x\"\n[train]\nsteps = 5\nwarmup_steps = 1\n").unwrap();
        assert_eq!(c.train.steps, 5);
        assert_eq!(c.model, ModelConfig::default());
    }

    #[test]
    fn errors_point_at_the_line() {
        let err = ExperimentConfig::from_toml("name = \"x\"\n[model]\nd = \"wide\"\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = ExperimentConfig::from_toml("[model]\nwidth = 3\n").unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
    }

    #[test]
    fn env_overrides() {
        let mut c = ExperimentConfig::default();
        c.apply_overrides(|k| match k {
            SEED_VAR => Some("7".into()),
            PRECISION_VAR => Some("f64".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!((c.model.seed, c.train.seed, c.data.seed), (7, 7, 7));
        assert_eq!(c.precision, Precision::F64);
        assert!(c.apply_overrides(|_| Some("nope".into())).is_err());
    }

    #[test]
    fn long_probes_are_rejected() {
        let mut c = ExperimentConfig::default();
        c.probes[0].t = 200;
        assert!(matches!(c.validate(), Err(Error::Input(_))));
    }
}
