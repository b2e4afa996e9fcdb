//! Byte-level corpora, document packing, token injection and probe sequences.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::write_atomic;

/// Reserved ids sit at the top of the vocabulary: BOS, EOS, then the sink token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub size: usize,
}

impl Vocab {
    pub const RESERVED: usize = 3;

    pub fn new(size: usize) -> Result<Self> {
        if size <= Self::RESERVED {
            return Err(Error::Config(format!("vocab {size} leaves no data tokens")));
        }
        Ok(Self { size })
    }

    pub fn bos(self) -> usize {
        self.size - 3
    }

    pub fn eos(self) -> usize {
        self.size - 2
    }

    pub fn sink(self) -> usize {
        self.size - 1
    }

    /// Ids `0..data_tokens()` carry content.
    pub fn data_tokens(self) -> usize {
        self.size - Self::RESERVED
    }

    pub fn is_reserved(self, id: usize) -> bool {
        id >= self.data_tokens() && id < self.size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BosPolicy {
    WithBos,
    #[default]
    WithoutBos,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectedKind {
    Random,
    Fixed,
    Sink,
}

/// A substitution recorded at a 1-based chunk position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub position: usize,
    pub kind: InjectedKind,
    pub token: usize,
}

/// Fixed-length training chunks with injection annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkStream {
    pub context: usize,
    pub chunks: Vec<Vec<usize>>,
    pub annotations: Vec<Vec<Annotation>>,
    pub source: String,
    pub seed: u64,
    /// Tokens discarded from the incomplete final chunk.
    pub dropped: usize,
}

impl ChunkStream {
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    /// Splits off the last `n` chunks as a held-out stream.
    pub fn split_tail(&self, n: usize) -> Result<(ChunkStream, ChunkStream)> {
        if n == 0 || n >= self.len() {
            return Err(Error::Input(format!(
                "cannot hold out {n} of {} chunks",
                self.len()
            )));
        }
        let cut = self.len() - n;
        let part = |range: std::ops::Range<usize>| ChunkStream {
            context: self.context,
            chunks: self.chunks[range.clone()].to_vec(),
            annotations: self.annotations[range].to_vec(),
            source: self.source.clone(),
            seed: self.seed,
            dropped: 0,
        };
        Ok((part(0..cut), part(cut..self.len())))
    }
}

/// Joins documents with EOS (and BOS prefixes) and cuts `context`-token chunks.
pub fn pack(
    documents: &[Vec<usize>],
    context: usize,
    bos: BosPolicy,
    vocab: Vocab,
) -> Result<ChunkStream> {
    if context < 2 {
        return Err(Error::Config("context must be at least 2".into()));
    }
    if documents.iter().all(Vec::is_empty) {
        return Err(Error::Input("empty corpus".into()));
    }
    let mut stream = Vec::new();
    for doc in documents {
        if bos == BosPolicy::WithBos {
            stream.push(vocab.bos());
        }
        stream.extend_from_slice(doc);
        stream.push(vocab.eos());
    }
    if let Some(&bad) = stream.iter().find(|&&t| t >= vocab.size) {
        return Err(Error::Input(format!("token {bad} outside vocab {}", vocab.size)));
    }
    let chunks: Vec<Vec<usize>> = stream.chunks_exact(context).map(<[usize]>::to_vec).collect();
    Ok(ChunkStream {
        context,
        annotations: vec![Vec::new(); chunks.len()],
        dropped: stream.len() % context,
        chunks,
        source: "documents".into(),
        seed: 0,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InjectionSpec {
    /// Resample the listed 1-based positions uniformly over data tokens.
    RandomUniform { positions: Vec<usize> },
    /// Write `token` at `position` in every chunk.
    FixedToken { position: usize, token: usize },
    /// Shift right by one, put the sink id first, truncate to the context.
    SinkTokenPrepend,
}

pub fn inject(
    stream: &ChunkStream,
    spec: &InjectionSpec,
    seed: u64,
    vocab: Vocab,
) -> Result<ChunkStream> {
    let c = stream.context;
    let mut out = stream.clone();
    match spec {
        InjectionSpec::RandomUniform { positions } => {
            if let Some(&bad) = positions.iter().find(|&&p| p == 0 || p > c) {
                return Err(Error::Range {
                    what: "injection position",
                    value: bad,
                    limit: c,
                });
            }
            let mut positions = positions.clone();
            positions.sort_unstable();
            positions.dedup();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (chunk, notes) in out.chunks.iter_mut().zip(&mut out.annotations) {
                for &p in &positions {
                    let token = rng.random_range(0..vocab.data_tokens());
                    chunk[p - 1] = token;
                    notes.push(Annotation {
                        position: p,
                        kind: InjectedKind::Random,
                        token,
                    });
                }
            }
        }
        &InjectionSpec::FixedToken { position, token } => {
            if position == 0 || position > c {
                return Err(Error::Range {
                    what: "injection position",
                    value: position,
                    limit: c,
                });
            }
            if token >= vocab.size {
                return Err(Error::Range {
                    what: "token",
                    value: token,
                    limit: vocab.size,
                });
            }
            for (chunk, notes) in out.chunks.iter_mut().zip(&mut out.annotations) {
                chunk[position - 1] = token;
                notes.push(Annotation {
                    position,
                    kind: InjectedKind::Fixed,
                    token,
                });
            }
        }
        InjectionSpec::SinkTokenPrepend => {
            for (chunk, notes) in out.chunks.iter_mut().zip(&mut out.annotations) {
                chunk.insert(0, vocab.sink());
                chunk.truncate(c);
                notes.retain_mut(|a| {
                    a.position += 1;
                    a.position <= c
                });
                notes.insert(
                    0,
                    Annotation {
                        position: 1,
                        kind: InjectedKind::Sink,
                        token: vocab.sink(),
                    },
                );
            }
        }
    }
    Ok(out)
}

fn default_alphabet() -> usize {
    64
}

fn default_branching() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusKind {
    /// I.i.d. tokens with `P(rank r) ∝ r^(−exponent)` over all data tokens.
    Zipf { exponent: f64 },
    /// Order-`order` chain over the first `alphabet` ids; each context has
    /// `branching` successors with fixed random weights.
    Markov {
        order: usize,
        #[serde(default = "default_alphabet")]
        alphabet: usize,
        #[serde(default = "default_branching")]
        branching: usize,
    },
    /// Raw bytes of a file as one document.
    BytesFile { path: PathBuf },
    /// One document per line of a UTF-8 file.
    LinesFile { path: PathBuf },
}

impl Default for CorpusKind {
    fn default() -> Self {
        CorpusKind::Markov {
            order: 2,
            alphabet: default_alphabet(),
            branching: default_branching(),
        }
    }
}

/// Documents for a corpus kind.
///
/// Synthetic kinds produce `n_tokens` tokens split into documents whose
/// lengths are uniform in `[doc_len/2, 3·doc_len/2]`. File kinds read the
/// whole file; a nonzero `n_tokens` truncates.
pub fn synth_corpus(
    kind: &CorpusKind,
    n_tokens: usize,
    doc_len: usize,
    seed: u64,
    vocab: Vocab,
) -> Result<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let docs = match kind {
        CorpusKind::Zipf { exponent } => {
            if !(exponent.is_finite() && *exponent >= 0.0) {
                return Err(Error::Config(format!("zipf exponent must be >= 0, got {exponent}")));
            }
            let weights: Vec<f64> = (1..=vocab.data_tokens())
                .map(|r| (r as f64).powf(-exponent))
                .collect();
            let dist = WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?;
            let stream: Vec<usize> = (0..n_tokens).map(|_| dist.sample(&mut rng)).collect();
            split_documents(stream, doc_len, &mut rng)
        }
        &CorpusKind::Markov {
            order,
            alphabet,
            branching,
        } => {
            let stream = markov_stream(order, alphabet, branching, n_tokens, vocab, &mut rng)?;
            split_documents(stream, doc_len, &mut rng)
        }
        CorpusKind::BytesFile { path } => {
            let bytes = read_bytes(path)?;
            vec![bytes_to_tokens(&bytes, vocab)?]
        }
        CorpusKind::LinesFile { path } => {
            let bytes = read_bytes(path)?;
            let text = std::str::from_utf8(&bytes)
                .map_err(|e| Error::Input(format!("{} is not UTF-8: {e}", path.display())))?;
            text.lines()
                .filter(|l| !l.is_empty())
                .map(|l| bytes_to_tokens(l.as_bytes(), vocab))
                .collect::<Result<_>>()?
        }
    };
    Ok(match kind {
        CorpusKind::BytesFile { .. } | CorpusKind::LinesFile { .. } if n_tokens > 0 => {
            truncate_documents(docs, n_tokens)
        }
        _ => docs,
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn bytes_to_tokens(bytes: &[u8], vocab: Vocab) -> Result<Vec<usize>> {
    if vocab.data_tokens() < 256 {
        return Err(Error::Config(format!(
            "byte corpora need at least 256 data tokens, vocab has {}",
            vocab.data_tokens()
        )));
    }
    Ok(bytes.iter().map(|&b| usize::from(b)).collect())
}

fn truncate_documents(docs: Vec<Vec<usize>>, mut budget: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for mut d in docs {
        if budget == 0 {
            break;
        }
        d.truncate(budget);
        budget -= d.len();
        out.push(d);
    }
    out
}

fn split_documents(stream: Vec<usize>, doc_len: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let doc_len = doc_len.max(2);
    let mut docs = Vec::new();
    let mut rest = stream.as_slice();
    while !rest.is_empty() {
        let len = rng.random_range(doc_len / 2..=doc_len + doc_len / 2).min(rest.len()).max(1);
        docs.push(rest[..len].to_vec());
        rest = &rest[len..];
    }
    docs
}

fn markov_stream(
    order: usize,
    alphabet: usize,
    branching: usize,
    n_tokens: usize,
    vocab: Vocab,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if order == 0 || alphabet < 2 || branching == 0 || branching > alphabet {
        return Err(Error::Config(format!(
            "markov needs order >= 1, alphabet >= 2, 1 <= branching <= alphabet \
             (order={order}, alphabet={alphabet}, branching={branching})"
        )));
    }
    if alphabet > vocab.data_tokens() {
        return Err(Error::Config(format!(
            "markov alphabet {alphabet} exceeds {} data tokens",
            vocab.data_tokens()
        )));
    }
    let contexts = u32::try_from(order)
        .ok()
        .and_then(|o| alphabet.checked_pow(o))
        .filter(|&n| n <= 1 << 20)
        .ok_or_else(|| Error::Config("markov transition table too large".into()))?;
    let table: Vec<(Vec<usize>, WeightedIndex<f64>)> = (0..contexts)
        .map(|_| {
            let successors = rand::seq::index::sample(rng, alphabet, branching).into_vec();
            let weights: Vec<f64> = (0..branching).map(|_| rng.random_range(0.1..1.0)).collect();
            let dist = WeightedIndex::new(&weights).expect("positive weights");
            (successors, dist)
        })
        .collect();
    let mut out: Vec<usize> = (0..order.min(n_tokens)).map(|_| rng.random_range(0..alphabet)).collect();
    while out.len() < n_tokens {
        let ctx = out[out.len() - order..]
            .iter()
            .fold(0usize, |acc, &t| acc * alphabet + t);
        let (succ, dist) = &table[ctx];
        out.push(succ[dist.sample(rng)]);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    /// Contiguous windows of held-out chunks.
    #[default]
    Natural,
    /// Tokens drawn uniformly from the data ids.
    Random,
    /// One drawn token repeated `T` times.
    Repeat,
}

impl std::str::FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "natural" => Ok(ProbeKind::Natural),
            "random" | "random_uniform" => Ok(ProbeKind::Random),
            "repeat" | "repeated" => Ok(ProbeKind::Repeat),
            other => Err(Error::Config(format!("unknown probe kind `{other}`"))),
        }
    }
}

/// `n` probe sequences of length `t`; reserved ids are never sampled.
pub fn probe_sequences(
    kind: ProbeKind,
    n: usize,
    t: usize,
    seed: u64,
    vocab: Vocab,
    held_out: Option<&ChunkStream>,
) -> Result<Vec<Vec<usize>>> {
    if t == 0 {
        return Err(Error::Input("probe length must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = vocab.data_tokens();
    Ok(match kind {
        ProbeKind::Random => (0..n)
            .map(|_| (0..t).map(|_| rng.random_range(0..data)).collect())
            .collect(),
        ProbeKind::Repeat => (0..n).map(|_| vec![rng.random_range(0..data); t]).collect(),
        ProbeKind::Natural => {
            let stream = held_out
                .filter(|s| !s.is_empty())
                .ok_or_else(|| Error::Input("natural probes need held-out chunks".into()))?;
            if t > stream.context {
                return Err(Error::Input(format!(
                    "probe length {t} exceeds chunk length {}",
                    stream.context
                )));
            }
            (0..n)
                .map(|_| {
                    let chunk = &stream.chunks[rng.random_range(0..stream.len())];
                    let start = rng.random_range(0..=stream.context - t);
                    chunk[start..start + t].to_vec()
                })
                .collect()
        }
    })
}

/// Writes `<stem>.bin` (u32 LE token ids) and `<stem>.manifest`.
pub fn export_chunks(stream: &ChunkStream, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let bin = stem.with_extension("bin");
    let manifest = stem.with_extension("manifest");
    let mut bytes = Vec::with_capacity(stream.len() * stream.context * 4);
    for chunk in &stream.chunks {
        for &t in chunk {
            let t = u32::try_from(t).map_err(|_| Error::Format(format!("token {t} exceeds u32")))?;
            bytes.extend_from_slice(&t.to_le_bytes());
        }
    }
    write_atomic(&bin, &bytes)?;
    let mut text = String::new();
    let _ = writeln!(text, "context={}", stream.context);
    let _ = writeln!(text, "count={}", stream.len());
    let _ = writeln!(text, "seed={}", stream.seed);
    let _ = writeln!(text, "dropped={}", stream.dropped);
    let _ = writeln!(text, "source={}", stream.source.replace('\n', " "));
    for (i, notes) in stream.annotations.iter().enumerate() {
        for a in notes {
            let kind = match a.kind {
                InjectedKind::Random => "random",
                InjectedKind::Fixed => "fixed",
                InjectedKind::Sink => "sink",
            };
            let _ = writeln!(text, "inject={i},{},{kind},{}", a.position, a.token);
        }
    }
    write_atomic(&manifest, text.as_bytes())?;
    Ok((bin, manifest))
}

pub fn import_chunks(stem: &Path) -> Result<ChunkStream> {
    let bin = stem.with_extension("bin");
    let manifest = stem.with_extension("manifest");
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let bad = |line: &str| Error::Format(format!("bad manifest line `{line}`"));
    let mut stream = ChunkStream {
        context: 0,
        chunks: Vec::new(),
        annotations: Vec::new(),
        source: String::new(),
        seed: 0,
        dropped: 0,
    };
    let mut count = 0;
    let mut notes = Vec::new();
    for line in text.lines() {
        let (key, value) = line.split_once('=').ok_or_else(|| bad(line))?;
        let num = |v: &str| v.parse::<u64>().map_err(|_| bad(line));
        match key {
            "context" => stream.context = num(value)? as usize,
            "count" => count = num(value)? as usize,
            "seed" => stream.seed = num(value)?,
            "dropped" => stream.dropped = num(value)? as usize,
            "source" => stream.source = value.to_string(),
            "inject" => {
                let parts: Vec<&str> = value.split(',').collect();
                let [chunk, pos, kind, token] = parts[..] else {
                    return Err(bad(line));
                };
                let kind = match kind {
                    "random" => InjectedKind::Random,
                    "fixed" => InjectedKind::Fixed,
                    "sink" => InjectedKind::Sink,
                    _ => return Err(bad(line)),
                };
                notes.push((
                    num(chunk)? as usize,
                    Annotation {
                        position: num(pos)? as usize,
                        kind,
                        token: num(token)? as usize,
                    },
                ));
            }
            _ => return Err(bad(line)),
        }
    }
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if stream.context == 0 || bytes.len() != count * stream.context * 4 {
        return Err(Error::Format("chunk file size does not match manifest".into()));
    }
    let ids: Vec<usize> = bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
        .collect();
    stream.chunks = ids.chunks_exact(stream.context).map(<[usize]>::to_vec).collect();
    stream.annotations = vec![Vec::new(); count];
    for (chunk, a) in notes {
        stream
            .annotations
            .get_mut(chunk)
            .ok_or_else(|| Error::Format(format!("annotation for missing chunk {chunk}")))?
            .push(a);
    }
    Ok(stream)
}

#[cfg(test)]
mod tests {
    use super::*;

    const V: Vocab = Vocab { size: 259 };

    #[test]
    fn reserved_ids() {
        assert_eq!((V.bos(), V.eos(), V.sink()), (256, 257, 258));
        assert!(V.is_reserved(256) && !V.is_reserved(255));
    }

    #[test]
    fn pack_without_bos() {
        let s = pack(&[vec![1, 2], vec![3]], 3, BosPolicy::WithoutBos, V).unwrap();
        assert_eq!(s.chunks, vec![vec![1, 2, V.eos()]]);
        assert_eq!(s.dropped, 2);
    }

    #[test]
    fn pack_with_bos() {
        let s = pack(&[vec![1], vec![2]], 4, BosPolicy::WithBos, V).unwrap();
        assert_eq!(s.chunks, vec![vec![V.bos(), 1, V.eos(), V.bos()]]);
        assert_eq!(s.dropped, 2);
    }

    #[test]
    fn pack_exact_and_empty() {
        let s = pack(&[vec![1, 2, 3], vec![4, 5]], 7, BosPolicy::WithoutBos, V).unwrap();
        assert_eq!(s.dropped, 0);
        assert_eq!(s.len(), 1);
        assert!(matches!(pack(&[], 4, BosPolicy::WithoutBos, V), Err(Error::Input(_))));
        assert!(matches!(pack(&[vec![]], 4, BosPolicy::WithoutBos, V), Err(Error::Input(_))));
    }

    fn stream() -> ChunkStream {
        pack(&[(0..40).collect()], 8, BosPolicy::WithoutBos, V).unwrap()
    }

    #[test]
    fn fixed_and_random_injection() {
        let s = stream();
        let f = inject(&s, &InjectionSpec::FixedToken { position: 1, token: 7 }, 0, V).unwrap();
        assert!(f.chunks.iter().all(|c| c[0] == 7));
        let r = inject(&s, &InjectionSpec::RandomUniform { positions: vec![1, 2] }, 3, V).unwrap();
        for ((orig, new), notes) in s.chunks.iter().zip(&r.chunks).zip(&r.annotations) {
            assert_eq!(&orig[2..], &new[2..]);
            assert_eq!(notes.len(), 2);
            assert!(new[..2].iter().all(|&t| !V.is_reserved(t)));
        }
        assert!(matches!(
            inject(&s, &InjectionSpec::FixedToken { position: 9, token: 7 }, 0, V),
            Err(Error::Range { .. })
        ));
    }

    #[test]
    fn sink_prepend_shifts_and_truncates() {
        let s = pack(&[vec![1, 2]], 3, BosPolicy::WithoutBos, V).unwrap();
        let out = inject(&s, &InjectionSpec::SinkTokenPrepend, 0, V).unwrap();
        assert_eq!(out.chunks[0], vec![V.sink(), 1, 2]);
        assert_eq!(out.annotations[0][0].kind, InjectedKind::Sink);
    }

    #[test]
    fn zipf_zero_is_uniform() {
        let docs = synth_corpus(&CorpusKind::Zipf { exponent: 0.0 }, 256 * 200, 100, 1, V).unwrap();
        let mut counts = vec![0f64; 256];
        for t in docs.iter().flatten() {
            counts[*t] += 1.0;
        }
        let expected = 200.0;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        // 255 degrees of freedom; the 0.999 quantile is about 330
        assert!(chi2 < 330.0, "chi2 = {chi2}");
    }

    #[test]
    fn synthetic_corpora_are_reproducible() {
        let kind = CorpusKind::default();
        let a = synth_corpus(&kind, 5000, 100, 9, V).unwrap();
        assert_eq!(a, synth_corpus(&kind, 5000, 100, 9, V).unwrap());
        assert_ne!(a, synth_corpus(&kind, 5000, 100, 10, V).unwrap());
        assert_eq!(a.iter().map(Vec::len).sum::<usize>(), 5000);
        assert!(a.iter().flatten().all(|&t| t < 64));
    }

    #[test]
    fn bytes_file_and_lines_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("blob");
        fs::write(&p, vec![7u8; 1024]).unwrap();
        let docs = synth_corpus(&CorpusKind::BytesFile { path: p }, 0, 0, 0, V).unwrap();
        assert_eq!(docs.iter().map(Vec::len).sum::<usize>(), 1024);
        let l = dir.path().join("lines.txt");
        fs::write(&l, "ab\ncd\n").unwrap();
        let docs = synth_corpus(&CorpusKind::LinesFile { path: l }, 0, 0, 0, V).unwrap();
        assert_eq!(docs, vec![vec![97, 98], vec![99, 100]]);
        let missing = synth_corpus(
            &CorpusKind::BytesFile {
                path: dir.path().join("nope"),
            },
            0,
            0,
            0,
            V,
        );
        assert!(matches!(missing, Err(Error::Io { .. })));
    }

    #[test]
    fn probes() {
        let rep = probe_sequences(ProbeKind::Repeat, 3, 4, 1, V, None).unwrap();
        assert!(rep.iter().all(|s| s.len() == 4 && s.iter().all(|&t| t == s[0])));
        let rnd = probe_sequences(ProbeKind::Random, 100, 64, 1, V, None).unwrap();
        assert!(rnd.iter().flatten().all(|&t| t < V.bos()));
        let s = stream();
        let nat = probe_sequences(ProbeKind::Natural, 5, 4, 2, V, Some(&s)).unwrap();
        for w in nat {
            assert!(s.chunks.iter().any(|c| c.windows(4).any(|x| x == w.as_slice())));
        }
        assert!(probe_sequences(ProbeKind::Natural, 1, 9, 0, V, Some(&s)).is_err());
    }

    #[test]
    fn export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = inject(&stream(), &InjectionSpec::RandomUniform { positions: vec![2] }, 4, V).unwrap();
        export_chunks(&s, &dir.path().join("train")).unwrap();
        let back = import_chunks(&dir.path().join("train")).unwrap();
        assert_eq!(back.chunks, s.chunks);
        assert_eq!(back.annotations, s.annotations);
    }
}
