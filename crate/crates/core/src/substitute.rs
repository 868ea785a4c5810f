//! Masked contexts, substitute filtering and substituter backends.
//!
//! A backend ranks vocabulary words for a single masked position. The
//! gateway never sees probabilities: it receives ranked strings, removes
//! stopwords, word pieces and duplicates, and keeps the first `k` (or
//! `k + 1` when substitutes are also stored for sense clustering).

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Occurrence};
use crate::error::{Error, Result};
use crate::seed;
use crate::stopwords::StopwordSet;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedContext {
    pub occurrence: Occurrence,
    /// The indexed term (a lemma when indexing on lemmas).
    pub term: String,
    pub left: Vec<String>,
    pub right: Vec<String>,
    /// The raw token that the mask replaces.
    pub masked_surface: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubstituteSet {
    pub occurrence: Occurrence,
    pub term: String,
    /// Most probable first.
    pub substitutes: Vec<String>,
}

impl SubstituteSet {
    /// The first `k` substitutes, as used for change scoring.
    pub fn top(&self, k: usize) -> &[String] {
        &self.substitutes[..k.min(self.substitutes.len())]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubstituterConfig {
    pub k: usize,
    /// Store `k + 1` substitutes so that sense clustering can drop the
    /// target and still keep `k`.
    pub keep_extra_for_senses: bool,
    pub window: usize,
    pub stopword_path: Option<PathBuf>,
    pub wordpiece_prefix: String,
    pub exclude_target: bool,
}

impl Default for SubstituterConfig {
    fn default() -> Self {
        Self {
            k: 5,
            keep_extra_for_senses: true,
            window: 50,
            stopword_path: None,
            wordpiece_prefix: "##".to_owned(),
            exclude_target: false,
        }
    }
}

impl SubstituterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("context window must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of substitutes kept per occurrence.
    pub fn k_keep(&self) -> usize {
        self.k + usize::from(self.keep_extra_for_senses)
    }

    pub fn load_stopwords(&self) -> Result<StopwordSet> {
        match &self.stopword_path {
            Some(p) => StopwordSet::load(p),
            None => Ok(StopwordSet::default()),
        }
    }
}

/// Up to `window` tokens on either side of the occurrence.
pub fn extract_context_window(
    doc: &Document,
    occurrence: &Occurrence,
    term: &str,
    window: usize,
) -> Result<MaskedContext> {
    let tokens = &doc.raw_tokens;
    let p = occurrence.token_position;
    if p >= tokens.len() {
        return Err(Error::PositionOutOfRange {
            doc_id: doc.doc_id.clone(),
            position: p,
            len: tokens.len(),
        });
    }
    Ok(MaskedContext {
        occurrence: occurrence.clone(),
        term: term.to_owned(),
        left: tokens[p.saturating_sub(window)..p].to_vec(),
        right: tokens[p + 1..tokens.len().min(p + window + 1)].to_vec(),
        masked_surface: tokens[p].clone(),
    })
}

/// Drop stopwords (case-insensitive), word pieces, duplicates and the
/// excluded term, preserving rank order, then keep the first `k_keep`.
pub fn filter_substitutes<S: AsRef<str>>(
    ranked: &[S],
    stopwords: &StopwordSet,
    wordpiece_prefix: &str,
    k_keep: usize,
    exclude: Option<&str>,
) -> Vec<String> {
    let exclude = exclude.map(str::to_lowercase);
    let mut kept: Vec<String> = Vec::with_capacity(k_keep);
    for cand in ranked {
        if kept.len() == k_keep {
            break;
        }
        let cand = cand.as_ref();
        if cand.is_empty()
            || (!wordpiece_prefix.is_empty() && cand.starts_with(wordpiece_prefix))
            || stopwords.contains(cand)
            || exclude.as_deref().is_some_and(|e| cand.to_lowercase() == e)
            || kept.iter().any(|k| k == cand)
        {
            continue;
        }
        kept.push(cand.to_owned());
    }
    kept
}

/// Per-item outcome of a backend call: a raw ranking or the backend's
/// error message for that item.
pub type Ranking = std::result::Result<Vec<String>, String>;

/// Anything that ranks substitutes for masked contexts.
pub trait Substituter {
    /// Raw rankings for every context, in input order. An `Err` aborts the
    /// whole batch (unreachable backend, protocol violation); per-item
    /// failures are reported inside the vector.
    fn rank(&mut self, contexts: &[MaskedContext], k: usize) -> Result<Vec<Ranking>>;
}

impl<T: Substituter + ?Sized> Substituter for Box<T> {
    fn rank(&mut self, contexts: &[MaskedContext], k: usize) -> Result<Vec<Ranking>> {
        (**self).rank(contexts, k)
    }
}

/// Substitute sets for a batch of contexts. Backend rankings are filtered
/// and truncated; sets shorter than `k` are kept as they are.
pub fn request_substitutes<B: Substituter + ?Sized>(
    contexts: &[MaskedContext],
    backend: &mut B,
    config: &SubstituterConfig,
    stopwords: &StopwordSet,
) -> Result<Vec<std::result::Result<SubstituteSet, String>>> {
    if contexts.is_empty() {
        return Err(Error::InvalidArgument("empty substitute batch".into()));
    }
    let k_keep = config.k_keep();
    let rankings = backend.rank(contexts, k_keep)?;
    if rankings.len() != contexts.len() {
        return Err(Error::Protocol(format!(
            "backend answered {} of {} requests",
            rankings.len(),
            contexts.len()
        )));
    }
    Ok(contexts
        .iter()
        .zip(rankings)
        .map(|(ctx, ranking)| {
            ranking.map(|ranked| {
                let exclude = config.exclude_target.then_some(ctx.term.as_str());
                let substitutes = filter_substitutes(&ranked, stopwords, &config.wordpiece_prefix, k_keep, exclude);
                if substitutes.len() < k_keep {
                    log::debug!(
                        "short substitute set for {} at {}: {} of {}",
                        ctx.term,
                        ctx.occurrence.request_id(),
                        substitutes.len(),
                        k_keep
                    );
                }
                SubstituteSet {
                    occurrence: ctx.occurrence.clone(),
                    term: ctx.term.clone(),
                    substitutes,
                }
            })
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Wire protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum BackendMessage {
    Hello {
        protocol: u32,
        mask_behavior: String,
    },
    Prediction {
        id: String,
        substitutes: Vec<String>,
    },
    Error {
        #[serde(default)]
        id: Option<String>,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum RequestMessage {
    Predict {
        id: String,
        left: Vec<String>,
        right: Vec<String>,
        k: usize,
    },
}

/// Client side of the JSON Lines protocol over any byte stream pair.
pub struct JsonLinesBackend<R, W> {
    reader: R,
    writer: W,
}

impl<R: BufRead, W: Write + Send> JsonLinesBackend<R, W> {
    /// Wait for the backend's `hello` and check the protocol version.
    pub fn handshake(mut reader: R, writer: W) -> Result<Self> {
        let mut line = String::new();
        let n = reader
            .read_line(&mut line)
            .map_err(|e| Error::BackendUnreachable(e.to_string()))?;
        if n == 0 {
            return Err(Error::BackendUnreachable("backend closed before handshake".into()));
        }
        match serde_json::from_str::<BackendMessage>(line.trim_end()) {
            Ok(BackendMessage::Hello {
                protocol,
                mask_behavior,
            }) => {
                if protocol != PROTOCOL_VERSION {
                    return Err(Error::Protocol(format!("unsupported protocol version {protocol}")));
                }
                if mask_behavior != "single-token" {
                    return Err(Error::Protocol(format!("unsupported mask behavior {mask_behavior}")));
                }
                Ok(Self { reader, writer })
            }
            Ok(other) => Err(Error::Protocol(format!("expected hello, got {other:?}"))),
            Err(e) => Err(Error::Protocol(format!("malformed handshake: {e}"))),
        }
    }
}

fn write_requests<W: Write>(writer: &mut W, requests: &[RequestMessage]) -> std::io::Result<()> {
    for req in requests {
        serde_json::to_writer(&mut *writer, req)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

impl<R: BufRead, W: Write + Send> Substituter for JsonLinesBackend<R, W> {
    fn rank(&mut self, contexts: &[MaskedContext], k: usize) -> Result<Vec<Ranking>> {
        let mut slots: HashMap<String, Vec<usize>> = HashMap::new();
        let mut requests = Vec::new();
        for (i, ctx) in contexts.iter().enumerate() {
            let id = ctx.occurrence.request_id();
            let entry = slots.entry(id.clone()).or_default();
            if entry.is_empty() {
                requests.push(RequestMessage::Predict {
                    id,
                    left: ctx.left.clone(),
                    right: ctx.right.clone(),
                    k,
                });
            }
            entry.push(i);
        }

        let reader = &mut self.reader;
        let writer = &mut self.writer;
        let expected = requests.len();
        let (written, answers) = std::thread::scope(|scope| {
            let sender = scope.spawn(move || write_requests(writer, &requests));
            let answers = read_answers(reader, &slots, expected);
            (sender.join(), answers)
        });
        let answers = answers?;
        match written {
            Ok(Ok(())) => {}
            Ok(Err(e)) => return Err(Error::BackendUnreachable(e.to_string())),
            Err(_) => return Err(Error::BackendUnreachable("request writer panicked".into())),
        }

        let mut out: Vec<Option<Ranking>> = vec![None; contexts.len()];
        for (id, answer) in answers {
            for &i in &slots[&id] {
                out[i] = Some(answer.clone());
            }
        }
        Ok(out.into_iter().map(|r| r.expect("every slot answered")).collect())
    }
}

fn read_answers<R: BufRead>(
    reader: &mut R,
    slots: &HashMap<String, Vec<usize>>,
    expected: usize,
) -> Result<HashMap<String, Ranking>> {
    let mut answers: HashMap<String, Ranking> = HashMap::with_capacity(expected);
    let mut line = String::new();
    while answers.len() < expected {
        line.clear();
        let n = reader
            .read_line(&mut line)
            .map_err(|e| Error::BackendUnreachable(e.to_string()))?;
        if n == 0 {
            return Err(Error::BackendUnreachable(format!(
                "backend closed the stream with {} of {} responses outstanding",
                expected - answers.len(),
                expected
            )));
        }
        if line.trim().is_empty() {
            continue;
        }
        let msg: BackendMessage =
            serde_json::from_str(line.trim_end()).map_err(|e| Error::Protocol(format!("malformed message: {e}")))?;
        let (id, answer) = match msg {
            BackendMessage::Prediction { id, substitutes } => (id, Ok(substitutes)),
            BackendMessage::Error { id: Some(id), message } => (id, Err(message)),
            BackendMessage::Error { id: None, message } => {
                return Err(Error::Protocol(format!("backend error without id: {message}")))
            }
            BackendMessage::Hello { .. } => return Err(Error::Protocol("unexpected hello".into())),
        };
        if !slots.contains_key(&id) {
            return Err(Error::Protocol(format!("response id {id} not in request batch")));
        }
        if answers.insert(id.clone(), answer).is_some() {
            return Err(Error::Protocol(format!("duplicate response for id {id}")));
        }
    }
    Ok(answers)
}

/// A backend subprocess speaking the protocol on its stdin/stdout.
pub struct ProcessBackend {
    child: Child,
    inner: JsonLinesBackend<BufReader<ChildStdout>, ChildStdin>,
}

impl ProcessBackend {
    pub fn spawn(argv: &[String]) -> Result<Self> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| Error::Config("backend command is empty".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::BackendUnreachable(format!("{program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let inner = JsonLinesBackend::handshake(stdout, stdin)?;
        Ok(Self { child, inner })
    }
}

impl Substituter for ProcessBackend {
    fn rank(&mut self, contexts: &[MaskedContext], k: usize) -> Result<Vec<Ranking>> {
        self.inner.rank(contexts, k)
    }
}

impl Drop for ProcessBackend {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub type TcpBackend = JsonLinesBackend<BufReader<TcpStream>, TcpStream>;

pub fn connect_tcp(address: &str) -> Result<TcpBackend> {
    let stream = TcpStream::connect(address).map_err(|e| Error::BackendUnreachable(format!("{address}: {e}")))?;
    let reader = BufReader::new(
        stream
            .try_clone()
            .map_err(|e| Error::BackendUnreachable(e.to_string()))?,
    );
    JsonLinesBackend::handshake(reader, stream)
}

// ---------------------------------------------------------------------------
// In-process backends
// ---------------------------------------------------------------------------

/// Returns the same ranking for every context.
#[derive(Debug, Clone)]
pub struct FixedRanking(pub Vec<String>);

impl Substituter for FixedRanking {
    fn rank(&mut self, contexts: &[MaskedContext], _k: usize) -> Result<Vec<Ranking>> {
        Ok(vec![Ok(self.0.clone()); contexts.len()])
    }
}

/// Categorical distribution over substitutes, or a mixture of senses where
/// each occurrence first draws one sense.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TermDistribution {
    Categorical(BTreeMap<String, f64>),
    Mixture { senses: Vec<WeightedSense> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedSense {
    pub weight: f64,
    pub dist: BTreeMap<String, f64>,
}

/// term -> corpus -> distribution
pub type SyntheticSpec = BTreeMap<String, BTreeMap<String, TermDistribution>>;

pub fn load_synthetic_spec(path: &Path) -> Result<SyntheticSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone)]
struct Categorical {
    items: Vec<String>,
    weights: Vec<f64>,
    cdf: Vec<f64>,
}

impl Categorical {
    fn new(dist: &BTreeMap<String, f64>, what: &str) -> Result<Self> {
        let sum: f64 = dist.values().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE || dist.values().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "distribution for {what} must be non-negative and sum to 1 (sum {sum})"
            )));
        }
        let (items, weights): (Vec<String>, Vec<f64>) = dist
            .iter()
            .filter(|(_, p)| **p > 0.0)
            .map(|(w, p)| (w.clone(), *p))
            .unzip();
        let mut acc = 0.0;
        let cdf = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Ok(Self { items, weights, cdf })
    }

    fn total(&self) -> f64 {
        self.cdf.last().copied().unwrap_or(0.0)
    }

    fn draw_one<R: Rng>(&self, rng: &mut R) -> usize {
        let u = rng.gen::<f64>() * self.total();
        self.cdf.partition_point(|c| *c <= u).min(self.items.len() - 1)
    }

    /// `n` distinct items drawn sequentially, each with probability
    /// proportional to its weight among the items not yet drawn.
    fn draw_distinct<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        let n = n.min(self.items.len());
        let total = self.total();
        let mut out: Vec<usize> = Vec::with_capacity(n);
        let mut removed = 0.0;
        while out.len() < n {
            if removed < 0.5 * total {
                // rejection of already-drawn items is exact renormalization
                let i = self.draw_one(rng);
                if !out.contains(&i) {
                    removed += self.weights[i];
                    out.push(i);
                }
            } else {
                let remaining: f64 = (0..self.items.len())
                    .filter(|i| !out.contains(i))
                    .map(|i| self.weights[i])
                    .sum();
                let mut u = rng.gen::<f64>() * remaining;
                let mut pick = None;
                for i in (0..self.items.len()).filter(|i| !out.contains(i)) {
                    pick = Some(i);
                    if u < self.weights[i] {
                        break;
                    }
                    u -= self.weights[i];
                }
                let i = pick.expect("n is bounded by the support size");
                removed += self.weights[i];
                out.push(i);
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
struct SenseMixture {
    senses: Categorical,
    dists: Vec<Categorical>,
}

/// Deterministic stand-in for a masked language model: the ranking for an
/// occurrence is a sequence of distinct draws from the term's distribution
/// in that occurrence's corpus, seeded by `(seed, occurrence)`.
#[derive(Debug, Clone)]
pub struct SyntheticSubstituter {
    dists: BTreeMap<(String, String), SenseMixture>,
    seed: u64,
    candidates_per_k: usize,
}

/// Build a [`SyntheticSubstituter`], validating every distribution.
pub fn synthetic_substituter(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticSubstituter> {
    let mut dists = BTreeMap::new();
    for (term, corpora) in spec {
        for (corpus, dist) in corpora {
            let what = format!("{term}/{corpus}");
            let mixture = match dist {
                TermDistribution::Categorical(d) => SenseMixture {
                    senses: Categorical::new(&BTreeMap::from([(String::new(), 1.0)]), &what)?,
                    dists: vec![Categorical::new(d, &what)?],
                },
                TermDistribution::Mixture { senses } => {
                    let weights: BTreeMap<String, f64> = senses
                        .iter()
                        .enumerate()
                        .map(|(i, s)| (format!("{i:06}"), s.weight))
                        .collect();
                    SenseMixture {
                        senses: Categorical::new(&weights, &format!("{what} sense weights"))?,
                        dists: senses
                            .iter()
                            .filter(|s| s.weight > 0.0)
                            .map(|s| Categorical::new(&s.dist, &what))
                            .collect::<Result<_>>()?,
                    }
                }
            };
            dists.insert((term.clone(), corpus.clone()), mixture);
        }
    }
    Ok(SyntheticSubstituter {
        dists,
        seed,
        candidates_per_k: 4,
    })
}

impl SyntheticSubstituter {
    /// Ranking length as a multiple of the requested `k`.
    pub fn with_candidates_per_k(mut self, n: usize) -> Self {
        self.candidates_per_k = n.max(1);
        self
    }

    fn ranking(&self, ctx: &MaskedContext, k: usize) -> Result<Vec<String>> {
        let occ = &ctx.occurrence;
        let mixture = self
            .dists
            .get(&(ctx.term.clone(), occ.corpus_id.clone()))
            .ok_or_else(|| Error::UnknownTerm(format!("{} in {} (synthetic spec)", ctx.term, occ.corpus_id)))?;
        let pos = occ.token_position.to_string();
        let mut rng = seed::rng_for(self.seed, &[&occ.corpus_id, &occ.doc_id, &pos]);
        let sense = &mixture.dists[mixture.senses.draw_one(&mut rng)];
        Ok(sense
            .draw_distinct(k * self.candidates_per_k, &mut rng)
            .into_iter()
            .map(|i| sense.items[i].clone())
            .collect())
    }
}

impl Substituter for SyntheticSubstituter {
    fn rank(&mut self, contexts: &[MaskedContext], k: usize) -> Result<Vec<Ranking>> {
        contexts.iter().map(|ctx| self.ranking(ctx, k).map(Ok)).collect()
    }
}

// ---------------------------------------------------------------------------
// Persisted substitutes
// ---------------------------------------------------------------------------

/// One JSON Lines row: an occurrence reference and its substitutes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubstituteRecord {
    pub term: String,
    pub corpus: String,
    pub doc: String,
    pub pos: usize,
    pub subs: Vec<String>,
}

impl From<&SubstituteSet> for SubstituteRecord {
    fn from(s: &SubstituteSet) -> Self {
        Self {
            term: s.term.clone(),
            corpus: s.occurrence.corpus_id.clone(),
            doc: s.occurrence.doc_id.clone(),
            pos: s.occurrence.token_position,
            subs: s.substitutes.clone(),
        }
    }
}

impl From<SubstituteRecord> for SubstituteSet {
    fn from(r: SubstituteRecord) -> Self {
        Self {
            occurrence: Occurrence::new(r.corpus, r.doc, r.pos),
            term: r.term,
            substitutes: r.subs,
        }
    }
}

pub fn write_substitute_sets<'a, W, I>(mut out: W, sets: I) -> std::io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a SubstituteSet>,
{
    for set in sets {
        serde_json::to_writer(&mut out, &SubstituteRecord::from(set))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Read substitute rows; lines that are not substitute records (such as a
/// leading configuration echo) are skipped.
pub fn read_substitute_sets(path: &Path) -> Result<Vec<SubstituteSet>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut sets = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, n + 1, e.to_string()))?;
        if value.get("term").is_none() {
            continue;
        }
        let record: SubstituteRecord =
            serde_json::from_value(value).map_err(|e| Error::parse(path, n + 1, e.to_string()))?;
        sets.push(record.into());
    }
    Ok(sets)
}
