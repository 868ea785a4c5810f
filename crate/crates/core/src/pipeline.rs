//! Staged runs over persisted artifacts.
//!
//! Stages form a chain (align, index, substitute, score, then senses and
//! eval). Each stage hashes the configuration it depends on together with
//! its upstream stage hash; a stage whose hash matches the manifest and
//! whose artifacts exist is skipped.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::align::{self, AlignmentConfig, AlignmentSet, AlignmentStats};
use crate::change::{self, ChangeScore};
use crate::corpus::{self, Corpus, CorpusFormat, FrequencyTable, Occurrence, OccurrenceIndex, TokenLayer};
use crate::error::{Error, Result};
use crate::eval::{self, DatasetReport, EvalReport};
use crate::seed::derive_seed;
use crate::senses::{self, SenseReport};
use crate::stopwords::StopwordSet;
use crate::substitute::{self, MaskedContext, SubstituteRecord, SubstituteSet, Substituter, SubstituterConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub id: String,
    pub raw: PathBuf,
    #[serde(default)]
    pub lemma: Option<PathBuf>,
    #[serde(default)]
    pub format: CorpusFormat,
}

fn default_candidates_per_k() -> usize {
    4
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendSpec {
    /// Only persisted substitutes can be used.
    #[default]
    None,
    Synthetic {
        spec: PathBuf,
        #[serde(default = "default_candidates_per_k")]
        candidates_per_k: usize,
    },
    Command {
        argv: Vec<String>,
    },
    Tcp {
        address: String,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreColumn {
    #[default]
    Scaled,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldSpec {
    #[serde(default = "default_dataset_id")]
    pub dataset_id: String,
    pub path: PathBuf,
    #[serde(default)]
    pub exclusions: Vec<String>,
    #[serde(default)]
    pub exclusion_file: Option<PathBuf>,
    #[serde(default)]
    pub lowercase: bool,
    #[serde(default)]
    pub score: ScoreColumn,
}

fn default_dataset_id() -> String {
    "gold".to_owned()
}

pub const BUILTIN_STOPWORDS: &str = "builtin:english";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpora: Vec<CorpusSpec>,
    /// One target term per line.
    pub targets: PathBuf,
    pub gold: Option<GoldSpec>,
    pub k: usize,
    /// Maximum sampled occurrences per term and corpus.
    pub cap: usize,
    pub background_count: usize,
    pub background_min_count: u64,
    pub frequency_factor: f64,
    pub window: usize,
    pub min_window: usize,
    pub seed: u64,
    pub backend: BackendSpec,
    pub batch_size: usize,
    /// A stopword file, or `builtin:english`.
    pub stopwords: Option<String>,
    pub wordpiece_prefix: String,
    pub exclude_target: bool,
    pub keep_extra_for_senses: bool,
    pub index_layer: TokenLayer,
    pub alignment: AlignmentConfig,
    /// Tab-separated `(lemma prefix, allowed form prefix)` pairs.
    pub exceptions: Option<PathBuf>,
    pub resolution: f64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpora: Vec::new(),
            targets: PathBuf::new(),
            gold: None,
            k: 5,
            cap: 4000,
            background_count: 10_000,
            background_min_count: 20,
            frequency_factor: 2.0,
            window: 50,
            min_window: 50,
            seed: 0,
            backend: BackendSpec::None,
            batch_size: 64,
            stopwords: Some(BUILTIN_STOPWORDS.to_owned()),
            wordpiece_prefix: "##".to_owned(),
            exclude_target: false,
            keep_extra_for_senses: true,
            index_layer: TokenLayer::Raw,
            alignment: AlignmentConfig::default(),
            exceptions: None,
            resolution: senses::DEFAULT_RESOLUTION,
            output_dir: PathBuf::from("artifacts"),
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() && !p.as_os_str().is_empty() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Parse a JSON config; relative paths are taken from its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut config: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        config.resolve_paths(&base);
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for c in &mut self.corpora {
            resolve(base, &mut c.raw);
            if let Some(l) = &mut c.lemma {
                resolve(base, l);
            }
        }
        resolve(base, &mut self.targets);
        resolve(base, &mut self.output_dir);
        if let Some(g) = &mut self.gold {
            resolve(base, &mut g.path);
            if let Some(f) = &mut g.exclusion_file {
                resolve(base, f);
            }
        }
        if let Some(e) = &mut self.exceptions {
            resolve(base, e);
        }
        if let BackendSpec::Synthetic { spec, .. } = &mut self.backend {
            resolve(base, spec);
        }
        if let Some(s) = &mut self.stopwords {
            if !s.starts_with("builtin:") {
                let mut p = PathBuf::from(&*s);
                resolve(base, &mut p);
                *s = p.to_string_lossy().into_owned();
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.corpora.len() != 2 {
            return bad(format!("exactly two corpora are required, got {}", self.corpora.len()));
        }
        if self.corpora[0].id == self.corpora[1].id {
            return bad(format!("corpus ids must differ, both are {}", self.corpora[0].id));
        }
        if self.targets.as_os_str().is_empty() {
            return bad("a target list is required".into());
        }
        for (name, v) in [
            ("k", self.k),
            ("cap", self.cap),
            ("window", self.window),
            ("min_window", self.min_window),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.frequency_factor.is_nan() || self.frequency_factor <= 1.0 {
            return bad(format!("frequency_factor must exceed 1, got {}", self.frequency_factor));
        }
        if self.resolution.is_nan() || self.resolution <= 0.0 {
            return bad(format!("resolution must be positive, got {}", self.resolution));
        }
        if self.index_layer == TokenLayer::Lemma {
            if let Some(c) = self.corpora.iter().find(|c| c.lemma.is_none()) {
                return bad(format!("index_layer lemma needs a lemma file for corpus {}", c.id));
            }
        }
        if let BackendSpec::Command { argv } = &self.backend {
            if argv.is_empty() {
                return bad("backend command is empty".into());
            }
        }
        self.alignment.validate()
    }

    pub fn corpus_ids(&self) -> Vec<String> {
        self.corpora.iter().map(|c| c.id.clone()).collect()
    }

    pub fn substituter_config(&self) -> SubstituterConfig {
        SubstituterConfig {
            k: self.k,
            keep_extra_for_senses: self.keep_extra_for_senses,
            window: self.window,
            stopword_path: self.stopwords.as_ref().map(PathBuf::from),
            wordpiece_prefix: self.wordpiece_prefix.clone(),
            exclude_target: self.exclude_target,
        }
    }

    fn stopword_set(&self) -> Result<StopwordSet> {
        self.substituter_config().load_stopwords()
    }

    fn alignment_config(&self) -> Result<AlignmentConfig> {
        let mut config = self.alignment.clone();
        if let Some(path) = &self.exceptions {
            config.first_letter_exceptions.extend(align::load_exceptions(path)?);
        }
        Ok(config)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub emit_plot_data: bool,
}

pub mod artifacts {
    pub const MANIFEST: &str = "manifest.json";
    pub const LOCK: &str = ".lock";
    pub const ALIGNMENT_DIR: &str = "alignments";
    pub const ALIGNMENT_STATS: &str = "alignment_stats.json";
    pub const INDEX: &str = "index.tsv";
    pub const FREQUENCIES: &str = "frequencies.tsv";
    pub const BACKGROUND: &str = "background.txt";
    pub const INDEX_SUMMARY: &str = "index_summary.json";
    pub const SUBSTITUTES: &str = "substitutes.jsonl";
    pub const SUBSTITUTES_PARTIAL: &str = "substitutes.partial.jsonl";
    pub const SUBSTITUTE_SUMMARY: &str = "substitute_summary.json";
    pub const SCORES: &str = "scores.tsv";
    pub const SCORE_SUMMARY: &str = "scores.json";
    pub const PLOT_DIR: &str = "plot";
    pub const PLOT_FREQUENCY_RAW: &str = "frequency_vs_raw.tsv";
    pub const PLOT_GOLD_SCALED: &str = "gold_vs_scaled.tsv";
    pub const SENSE_DIR: &str = "senses";
    pub const EVAL: &str = "eval.json";
}
const SUBSTITUTE_KEY: &str = "substitute:key";
use artifacts::*;

/// Holds the artifact directory exclusively while alive.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Write through a temporary file and rename, so readers never see a
/// half-written artifact.
fn write_atomic<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut out = BufWriter::new(file);
    body(&mut out)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(&tmp, e))?;
    drop(out);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_atomic(path, |w| writeln!(w, "{text}"))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Artifact JSON: the config echo plus a stage payload.
fn read_payload<T: DeserializeOwned>(path: &Path, key: &str) -> Result<T> {
    let mut v: Value = read_json(path)?;
    let payload = v
        .get_mut(key)
        .map(Value::take)
        .ok_or_else(|| Error::parse(path, 1, format!("missing {key}")))?;
    Ok(serde_json::from_value(payload)?)
}

fn file_name_for(term: &str) -> String {
    let safe: String = term
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.json")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexSummary {
    pub targets: usize,
    pub background: usize,
    pub background_pool: usize,
    pub background_warning: Option<String>,
    /// Targets with no occurrence in at least one corpus.
    pub targets_missing: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstituteSummary {
    pub occurrences: usize,
    pub stored: usize,
    pub failed: usize,
    pub resumed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub targets: usize,
    pub defined: usize,
    pub undefined: Vec<String>,
    pub background: usize,
    pub background_comparable: usize,
    pub widened: usize,
}

/// Substitutes recovered from an interrupted run, keyed by term and occurrence.
type PartialSets = BTreeMap<(String, Occurrence), Vec<String>>;

/// A pipeline bound to one configuration and one locked artifact directory.
pub struct Pipeline {
    config: RunConfig,
    options: RunOptions,
    out: PathBuf,
    manifest: BTreeMap<String, String>,
    backend: Option<Box<dyn Substituter>>,
    _lock: DirLock,
}

impl Pipeline {
    pub fn open(mut config: RunConfig, options: RunOptions) -> Result<Self> {
        if let Some(seed) = options.seed {
            config.seed = seed;
        }
        config.validate()?;
        let out = config.output_dir.clone();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let lock = DirLock::acquire(&out)?;
        let manifest_path = out.join(MANIFEST);
        let manifest = if manifest_path.exists() {
            read_payload(&manifest_path, "stages")?
        } else {
            BTreeMap::new()
        };
        Ok(Self {
            config,
            options,
            out,
            manifest,
            backend: None,
            _lock: lock,
        })
    }

    /// Use this backend instead of the one named in the configuration.
    pub fn with_backend(mut self, backend: Box<dyn Substituter>) -> Self {
        self.backend = Some(backend);
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn echo(&self, stage: &str) -> Value {
        json!({ "stage": stage, "config": self.config })
    }

    fn echo_line(&self, stage: &str) -> String {
        format!("#config\t{}", self.echo(stage))
    }

    fn with_echo(&self, stage: &str, key: &str, payload: impl Serialize) -> Result<Value> {
        let mut v = self.echo(stage);
        v[key] = serde_json::to_value(payload)?;
        Ok(v)
    }

    fn stage_hash(stage: &str, inputs: Value) -> String {
        let mut h = Sha256::new();
        h.update(stage.as_bytes());
        h.update(b"\n");
        h.update(inputs.to_string().as_bytes());
        hex::encode(h.finalize())
    }

    fn is_current(&self, stage: &str, hash: &str, files: &[PathBuf]) -> bool {
        self.manifest.get(stage).is_some_and(|h| h == hash) && files.iter().all(|f| f.exists())
    }

    fn mark_done(&mut self, stage: &str, hash: &str) -> Result<()> {
        self.manifest.insert(stage.to_owned(), hash.to_owned());
        write_json(&self.path(MANIFEST), &json!({ "stages": self.manifest }))
    }

    fn load_corpora(&self) -> Result<Vec<Corpus>> {
        self.config
            .corpora
            .iter()
            .map(|c| match &c.lemma {
                Some(lemma) => corpus::load_corpus_with_lemmas(&c.raw, lemma, &c.id, c.format),
                None => corpus::load_corpus(&c.raw, &c.id, c.format),
            })
            .collect()
    }

    fn alignment_files(&self) -> Vec<PathBuf> {
        let mut files: Vec<PathBuf> = self
            .config
            .corpora
            .iter()
            .map(|c| self.out.join(ALIGNMENT_DIR).join(format!("{}.tsv", c.id)))
            .collect();
        files.push(self.path(ALIGNMENT_STATS));
        files
    }

    // -- hashes ------------------------------------------------------------

    fn align_hash(&self) -> String {
        Self::stage_hash("align", json!({ "corpora": self.config.corpora }))
    }

    fn index_hash(&self) -> String {
        let c = &self.config;
        let upstream = (c.index_layer == TokenLayer::Lemma).then(|| self.align_hash());
        Self::stage_hash(
            "index",
            json!({
                "align": upstream,
                "corpora": c.corpora,
                "targets": c.targets,
                "index_layer": c.index_layer,
                "alignment": c.alignment,
                "exceptions": c.exceptions,
                "background_count": c.background_count,
                "background_min_count": c.background_min_count,
                "stopwords": c.stopwords,
                "seed": c.seed,
            }),
        )
    }

    /// Everything that selects and filters substitutes, except the backend.
    fn substitute_key(&self) -> String {
        let c = &self.config;
        Self::stage_hash(
            "substitute-key",
            json!({
                "index": self.index_hash(),
                "k": c.k,
                "keep_extra_for_senses": c.keep_extra_for_senses,
                "cap": c.cap,
                "window": c.window,
                "stopwords": c.stopwords,
                "wordpiece_prefix": c.wordpiece_prefix,
                "exclude_target": c.exclude_target,
                "seed": c.seed,
            }),
        )
    }

    fn substitute_identity(&self, key: &str) -> String {
        Self::stage_hash("substitute", json!({ "key": key, "backend": self.config.backend }))
    }

    /// Hash of the substitutes on disk when they match the current key
    /// (they may come from an earlier backend), else of the ones this
    /// configuration would produce.
    fn substitute_hash(&self) -> String {
        let key = self.substitute_key();
        match (self.manifest.get(SUBSTITUTE_KEY), self.manifest.get("substitute")) {
            (Some(k), Some(h)) if *k == key => h.clone(),
            _ => self.substitute_identity(&key),
        }
    }

    fn score_hash(&self) -> String {
        let c = &self.config;
        Self::stage_hash(
            "score",
            json!({
                "substitute": self.substitute_hash(),
                "k": c.k,
                "frequency_factor": c.frequency_factor,
                "min_window": c.min_window,
            }),
        )
    }

    fn senses_hash(&self) -> String {
        let c = &self.config;
        Self::stage_hash(
            "senses",
            json!({ "substitute": self.substitute_hash(), "k": c.k, "resolution": c.resolution, "seed": c.seed }),
        )
    }

    fn eval_hash(&self) -> String {
        Self::stage_hash("eval", json!({ "score": self.score_hash(), "gold": self.config.gold }))
    }

    // -- align -------------------------------------------------------------

    /// Align lemma and raw tokens of every document.
    pub fn align(&mut self) -> Result<AlignmentStats> {
        let hash = self.align_hash();
        if self.is_current("align", &hash, &self.alignment_files()) {
            log::info!("align: up to date");
            return read_payload(&self.path(ALIGNMENT_STATS), "stats");
        }
        let corpora = self.load_corpora()?;
        let set = align::align_corpora(&corpora)?;
        let echo = self.echo_line("align");
        for c in &corpora {
            let path = self.out.join(ALIGNMENT_DIR).join(format!("{}.tsv", c.corpus_id));
            write_atomic(&path, |w| {
                writeln!(w, "{echo}")?;
                set.write_corpus_tsv(&c.corpus_id, w)
            })?;
        }
        let stats = set.stats();
        write_json(&self.path(ALIGNMENT_STATS), &self.with_echo("align", "stats", stats)?)?;
        self.mark_done("align", &hash)?;
        Ok(stats)
    }

    fn read_alignments(&self) -> Result<AlignmentSet> {
        let mut set = AlignmentSet::default();
        for c in &self.config.corpora {
            let path = self.out.join(ALIGNMENT_DIR).join(format!("{}.tsv", c.id));
            set.read_corpus_tsv(&c.id, &path)?;
        }
        Ok(set)
    }

    // -- index -------------------------------------------------------------

    fn targets(&self) -> Result<BTreeSet<String>> {
        let targets = eval::read_term_list(&self.config.targets)?;
        if targets.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "target list {} is empty",
                self.config.targets.display()
            )));
        }
        Ok(targets)
    }

    fn background(&self) -> Result<BTreeSet<String>> {
        eval::read_term_list(&self.path(BACKGROUND))
    }

    /// Select background terms and index targets and background terms.
    pub fn index(&mut self) -> Result<IndexSummary> {
        let layer = self.config.index_layer;
        if layer == TokenLayer::Lemma {
            self.align()?;
        }
        let hash = self.index_hash();
        let files = [INDEX, FREQUENCIES, BACKGROUND, INDEX_SUMMARY].map(|f| self.path(f));
        if self.is_current("index", &hash, &files) {
            log::info!("index: up to date");
            return read_payload(&self.path(INDEX_SUMMARY), "summary");
        }
        let targets = self.targets()?;
        let corpora = self.load_corpora()?;
        let vocab = corpus::vocabulary_counts(&corpora, layer)?;
        let selection = corpus::select_background_terms(
            &vocab,
            self.config.background_count,
            &targets,
            self.config.background_min_count,
            &self.config.stopword_set()?,
            derive_seed(self.config.seed, &["background"]),
        );
        let terms: BTreeSet<String> = targets.union(&selection.terms).cloned().collect();
        let index = match layer {
            TokenLayer::Raw => corpus::build_index(&corpora, &terms, layer, None)?,
            TokenLayer::Lemma => {
                let alignments = self.read_alignments()?;
                let config = self.config.alignment_config()?;
                corpus::build_index(&corpora, &terms, layer, Some((&alignments, &config)))?
            }
        };
        let freq = corpus::term_frequencies(&index);
        let targets_missing: Vec<String> = targets
            .iter()
            .filter(|t| index.corpus_ids.iter().any(|c| freq.count(t, c) == 0))
            .cloned()
            .collect();
        if !targets_missing.is_empty() {
            log::warn!("targets absent from a corpus: {}", targets_missing.join(", "));
        }

        let echo = self.echo_line("index");
        write_atomic(&self.path(INDEX), |w| {
            writeln!(w, "{echo}")?;
            index.write_tsv(w)
        })?;
        write_atomic(&self.path(FREQUENCIES), |w| {
            writeln!(w, "{echo}")?;
            freq.write_tsv(w)
        })?;
        write_atomic(&self.path(BACKGROUND), |w| {
            writeln!(w, "{echo}")?;
            for t in &selection.terms {
                writeln!(w, "{t}")?;
            }
            Ok(())
        })?;
        let summary = IndexSummary {
            targets: targets.len(),
            background: selection.terms.len(),
            background_pool: selection.pool_size,
            background_warning: selection.warning,
            targets_missing,
        };
        write_json(
            &self.path(INDEX_SUMMARY),
            &self.with_echo("index", "summary", &summary)?,
        )?;
        self.mark_done("index", &hash)?;
        Ok(summary)
    }

    // -- substitute --------------------------------------------------------

    fn make_backend(&self) -> Result<Box<dyn Substituter>> {
        match &self.config.backend {
            BackendSpec::None => Err(Error::BackendUnreachable(
                "no backend configured and substitutes are incomplete".into(),
            )),
            BackendSpec::Synthetic { spec, candidates_per_k } => {
                let spec = substitute::load_synthetic_spec(spec)?;
                let backend = substitute::synthetic_substituter(&spec, derive_seed(self.config.seed, &["synthetic"]))?
                    .with_candidates_per_k(*candidates_per_k);
                Ok(Box::new(backend))
            }
            BackendSpec::Command { argv } => Ok(Box::new(substitute::ProcessBackend::spawn(argv)?)),
            BackendSpec::Tcp { address } => Ok(Box::new(substitute::connect_tcp(address)?)),
        }
    }

    /// Sampled occurrences in canonical order: by term, then index order.
    fn sample_work(&self, index: &OccurrenceIndex, terms: &BTreeSet<String>) -> Result<Vec<(String, Occurrence)>> {
        let mut work = Vec::new();
        for term in terms {
            for c in &index.corpus_ids {
                if index.occurrences_in(term, c).is_none_or(<[Occurrence]>::is_empty) {
                    continue;
                }
                let seed = derive_seed(self.config.seed, &["sample", term, c]);
                let sample = corpus::sample_occurrences(index, term, c, self.config.cap, seed)?;
                work.extend(sample.into_iter().map(|o| (term.clone(), o)));
            }
        }
        Ok(work)
    }

    /// Records from an interrupted run with the same stage hash.
    fn read_partial(&self, hash: &str) -> Result<Option<PartialSets>> {
        let path = self.path(SUBSTITUTES_PARTIAL);
        let Ok(file) = File::open(&path) else {
            return Ok(None);
        };
        let mut lines = BufReader::new(file).lines();
        let header: Option<Value> = lines
            .next()
            .and_then(|l| l.ok())
            .and_then(|l| serde_json::from_str(&l).ok());
        if header
            .as_ref()
            .and_then(|h| h.get("stage_hash"))
            .and_then(Value::as_str)
            != Some(hash)
        {
            log::info!("substitute: discarding partial results from a different configuration");
            return Ok(None);
        }
        let mut done = BTreeMap::new();
        for line in lines {
            let line = line.map_err(|e| Error::io(&path, e))?;
            // a crash can leave the final line truncated
            if let Ok(r) = serde_json::from_str::<SubstituteRecord>(&line) {
                let set = SubstituteSet::from(r);
                done.insert((set.term, set.occurrence), set.substitutes);
            }
        }
        Ok(Some(done))
    }

    /// Request substitutes for every sampled occurrence. Completed batches
    /// are appended to a partial file so an interrupted run can resume.
    ///
    /// Stored substitutes are reused when the sampling and filtering
    /// settings match and either the backend is unchanged or none is
    /// configured.
    pub fn substitute(&mut self) -> Result<SubstituteSummary> {
        self.index()?;
        let key = self.substitute_key();
        let hash = self.substitute_identity(&key);
        let files = [SUBSTITUTES, SUBSTITUTE_SUMMARY].map(|f| self.path(f));
        let reusable =
            self.config.backend == BackendSpec::None || self.manifest.get("substitute").is_some_and(|h| *h == hash);
        if reusable && self.is_current(SUBSTITUTE_KEY, &key, &files) {
            log::info!("substitute: up to date");
            return read_payload(&self.path(SUBSTITUTE_SUMMARY), "summary");
        }
        let index = OccurrenceIndex::read_tsv(&self.path(INDEX), None)?;
        let terms: BTreeSet<String> = self.targets()?.union(&self.background()?).cloned().collect();
        let work = self.sample_work(&index, &terms)?;

        let partial_path = self.path(SUBSTITUTES_PARTIAL);
        let (mut done, fresh) = match self.read_partial(&hash)? {
            Some(done) => (done, false),
            None => (BTreeMap::new(), true),
        };
        let resumed = done.len();
        let pending: Vec<&(String, Occurrence)> = work.iter().filter(|w| !done.contains_key(*w)).collect();
        let mut failed = 0;
        if !pending.is_empty() {
            log::info!("substitute: {} of {} occurrences pending", pending.len(), work.len());
            let mut backend = match self.backend.take() {
                Some(b) => b,
                None => self.make_backend()?,
            };
            let result = self.run_batches(&pending, &mut *backend, &partial_path, fresh, &hash, &mut done);
            self.backend = Some(backend);
            failed = result?;
        }

        let sets: Vec<SubstituteSet> = work
            .iter()
            .filter_map(|(t, o)| {
                done.get(&(t.clone(), o.clone())).map(|subs| SubstituteSet {
                    occurrence: o.clone(),
                    term: t.clone(),
                    substitutes: subs.clone(),
                })
            })
            .collect();
        let echo = self.echo("substitute");
        write_atomic(&self.path(SUBSTITUTES), |w| {
            serde_json::to_writer(&mut *w, &json!({ "config": echo }))?;
            writeln!(w)?;
            substitute::write_substitute_sets(w, &sets)
        })?;
        let _ = fs::remove_file(&partial_path);
        let summary = SubstituteSummary {
            occurrences: work.len(),
            stored: sets.len(),
            failed,
            resumed,
        };
        write_json(
            &self.path(SUBSTITUTE_SUMMARY),
            &self.with_echo("substitute", "summary", &summary)?,
        )?;
        self.mark_done("substitute", &hash)?;
        self.mark_done(SUBSTITUTE_KEY, &key)?;
        Ok(summary)
    }

    fn run_batches(
        &self,
        pending: &[&(String, Occurrence)],
        backend: &mut dyn Substituter,
        partial_path: &Path,
        fresh: bool,
        hash: &str,
        done: &mut BTreeMap<(String, Occurrence), Vec<String>>,
    ) -> Result<usize> {
        let corpora = self.load_corpora()?;
        let by_id: BTreeMap<&str, &Corpus> = corpora.iter().map(|c| (c.corpus_id.as_str(), c)).collect();
        let config = self.config.substituter_config();
        let stopwords = config.load_stopwords()?;

        let file = OpenOptions::new()
            .create(true)
            .append(!fresh)
            .write(true)
            .truncate(fresh)
            .open(partial_path)
            .map_err(|e| Error::io(partial_path, e))?;
        let mut partial = BufWriter::new(file);
        let io = |e: std::io::Error| Error::io(partial_path, e);
        if fresh {
            let header = json!({ "config": self.echo("substitute"), "stage_hash": hash });
            writeln!(partial, "{header}").map_err(io)?;
        }

        let mut failed = 0;
        for chunk in pending.chunks(self.config.batch_size) {
            let contexts = chunk
                .iter()
                .map(|(term, occ)| {
                    let doc = by_id
                        .get(occ.corpus_id.as_str())
                        .and_then(|c| c.document(&occ.doc_id))
                        .ok_or_else(|| {
                            Error::InvalidArgument(format!("document {} not in corpus {}", occ.doc_id, occ.corpus_id))
                        })?;
                    substitute::extract_context_window(doc, occ, term, config.window)
                })
                .collect::<Result<Vec<MaskedContext>>>()?;
            let outcomes = substitute::request_substitutes(&contexts, backend, &config, &stopwords)?;
            for ((term, occ), outcome) in chunk.iter().zip(outcomes) {
                match outcome {
                    Ok(set) => {
                        serde_json::to_writer(&mut partial, &SubstituteRecord::from(&set))?;
                        writeln!(partial).map_err(io)?;
                        done.insert((term.clone(), occ.clone()), set.substitutes);
                    }
                    Err(message) => {
                        failed += 1;
                        log::warn!("substitute: {term} at {}: {message}", occ.request_id());
                    }
                }
            }
            partial.flush().map_err(io)?;
        }
        Ok(failed)
    }

    fn read_sets(&self) -> Result<Vec<SubstituteSet>> {
        substitute::read_substitute_sets(&self.path(SUBSTITUTES))
    }

    // -- score -------------------------------------------------------------

    /// Raw and scaled change scores for every target.
    pub fn score(&mut self) -> Result<Vec<ChangeScore>> {
        self.substitute()?;
        let hash = self.score_hash();
        let files = [SCORES, SCORE_SUMMARY].map(|f| self.path(f));
        let current = self.is_current("score", &hash, &files);
        if current && !self.options.emit_plot_data {
            log::info!("score: up to date");
            return change::read_score_report(&self.path(SCORES));
        }
        let targets = self.targets()?;
        let background = self.background()?;
        let freq = FrequencyTable::read_tsv(&self.path(FREQUENCIES))?;
        let sets = self.read_sets()?;
        let terms = targets.iter().chain(&background).map(String::as_str);
        let dists = change::distributions_from_sets(&sets, &freq.corpus_ids, terms, self.config.k)?;
        let scores = change::score_all(
            &targets,
            &background,
            &dists,
            &freq,
            self.config.frequency_factor,
            self.config.min_window,
        )?;

        if !current {
            let echo = format!("config\t{}", self.echo("score"));
            write_atomic(&self.path(SCORES), |w| {
                change::write_score_report(w, &scores, Some(&echo))
            })?;
            let background_raw = change::background_raw_scores(&background, &dists);
            let summary = ScoreSummary {
                targets: scores.len(),
                defined: scores.iter().filter(|s| s.scaled.is_some()).count(),
                undefined: scores
                    .iter()
                    .filter(|s| s.scaled.is_none())
                    .map(|s| s.term.clone())
                    .collect(),
                background: background.len(),
                background_comparable: background_raw.len(),
                widened: scores.iter().filter(|s| s.widen_steps > 0).count(),
            };
            write_json(
                &self.path(SCORE_SUMMARY),
                &self.with_echo("score", "summary", &summary)?,
            )?;
            self.mark_done("score", &hash)?;
        }
        if self.options.emit_plot_data {
            self.write_plot_data(&scores, &background, &dists, &freq)?;
        }
        Ok(scores)
    }

    fn write_plot_data(
        &self,
        scores: &[ChangeScore],
        background: &BTreeSet<String>,
        dists: &change::DistributionTable,
        freq: &FrequencyTable,
    ) -> Result<()> {
        let dir = self.out.join(PLOT_DIR);
        let echo = self.echo_line("score");
        let background_raw = change::background_raw_scores(background, dists);
        write_atomic(&dir.join(PLOT_FREQUENCY_RAW), |w| {
            writeln!(w, "{echo}")?;
            writeln!(w, "term\trole\tfrequency\traw_jsd")?;
            for s in scores {
                if let Some(raw) = s.raw {
                    writeln!(w, "{}\ttarget\t{}\t{raw}", s.term, s.frequency)?;
                }
            }
            for (term, raw) in &background_raw {
                writeln!(w, "{term}\tbackground\t{}\t{raw}", freq.union_count(term))?;
            }
            Ok(())
        })?;
        if let Some(gold) = &self.config.gold {
            let ratings = eval::read_gold(&gold.path)?;
            write_atomic(&dir.join(PLOT_GOLD_SCALED), |w| {
                writeln!(w, "{echo}")?;
                writeln!(w, "term\tgold\tscaled")?;
                for s in scores {
                    if let (Some(g), Some(scaled)) = (ratings.get(&s.term), s.scaled) {
                        writeln!(w, "{}\t{g}\t{scaled}", s.term)?;
                    }
                }
                Ok(())
            })?;
        }
        Ok(())
    }

    // -- senses ------------------------------------------------------------

    /// Sense clusters for the given terms, or for every target when empty.
    pub fn senses(&mut self, terms: &[String]) -> Result<Vec<SenseReport>> {
        self.substitute()?;
        let targets = self.targets()?;
        let known: BTreeSet<String> = targets.union(&self.background()?).cloned().collect();
        let requested: Vec<String> = if terms.is_empty() {
            targets.into_iter().collect()
        } else {
            terms.to_vec()
        };
        if let Some(t) = requested.iter().find(|t| !known.contains(*t)) {
            return Err(Error::UnknownTerm(t.clone()));
        }
        let hash = self.senses_hash();
        let dir = self.out.join(SENSE_DIR);
        let mut sets: Option<Vec<SubstituteSet>> = None;
        let mut reports = Vec::new();
        for term in &requested {
            let stage = format!("senses:{term}");
            let path = dir.join(file_name_for(term));
            if self.is_current(&stage, &hash, std::slice::from_ref(&path)) {
                reports.push(read_payload(&path, "report")?);
                continue;
            }
            if sets.is_none() {
                sets = Some(self.read_sets()?);
            }
            let views: Vec<SubstituteSet> = sets
                .as_ref()
                .expect("loaded above")
                .iter()
                .filter(|s| &s.term == term)
                .map(|s| senses::sense_view(s, self.config.k))
                .filter(|s| !s.substitutes.is_empty())
                .collect();
            if views.is_empty() {
                return Err(Error::InvalidArgument(format!("no substitutes stored for {term}")));
            }
            let (report, _) = senses::induce_senses(
                term,
                &views,
                &self.config.corpus_ids(),
                self.config.resolution,
                derive_seed(self.config.seed, &["senses"]),
            )?;
            write_json(&path, &self.with_echo("senses", "report", &report)?)?;
            self.mark_done(&stage, &hash)?;
            reports.push(report);
        }
        Ok(reports)
    }

    // -- eval --------------------------------------------------------------

    /// Correlate scores with the configured gold ratings.
    pub fn eval(&mut self) -> Result<EvalReport> {
        let gold = self
            .config
            .gold
            .clone()
            .ok_or_else(|| Error::Config("eval needs a gold section".into()))?;
        self.score()?;
        let hash = self.eval_hash();
        if self.is_current("eval", &hash, &[self.path(EVAL)]) {
            log::info!("eval: up to date");
            return read_payload(&self.path(EVAL), "report");
        }
        let scores = change::read_score_report(&self.path(SCORES))?;
        let mut exclusions: BTreeSet<String> = gold.exclusions.iter().cloned().collect();
        if let Some(f) = &gold.exclusion_file {
            exclusions.extend(eval::read_term_list(f)?);
        }
        let ratings = eval::apply_exclusions(&gold.dataset_id, eval::read_gold(&gold.path)?, &exclusions);
        let system: BTreeMap<String, f64> = scores
            .iter()
            .filter_map(|s| {
                let v = match gold.score {
                    ScoreColumn::Scaled => s.scaled,
                    ScoreColumn::Raw => s.raw,
                };
                v.map(|v| (s.term.clone(), v))
            })
            .collect();
        let (result, join) = eval::evaluate(&ratings, &system, gold.lowercase)?;
        let weights = BTreeMap::from([(result.dataset_id.clone(), result.n as f64)]);
        let aggregate = eval::aggregate(std::slice::from_ref(&result), Some(&weights))?;
        let report = EvalReport {
            datasets: vec![DatasetReport {
                result,
                exclusions_applied: ratings.exclusions_applied,
                join,
            }],
            aggregate,
        };
        write_json(&self.path(EVAL), &self.with_echo("eval", "report", &report)?)?;
        self.mark_done("eval", &hash)?;
        Ok(report)
    }
}
