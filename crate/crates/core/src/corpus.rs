//! Period corpora, occurrence indexing, seeded sampling and frequency tables.
//!
//! Corpora are assumed to be pre-tokenized: tokens are whitespace separated
//! and no further normalization is applied. A corpus may carry a lemma layer
//! aligned document-by-document with the raw layer; lemma-level indexing
//! goes through [`crate::align`] so that every occurrence ends up pointing at
//! a raw token position.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{self, AlignmentConfig, AlignmentSet};
use crate::error::{Error, Result};
use crate::seed;
use crate::stopwords::StopwordSet;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub raw_tokens: Vec<String>,
    pub lemma_tokens: Option<Vec<String>>,
}

impl Document {
    pub fn tokens(&self, layer: TokenLayer) -> Option<&[String]> {
        match layer {
            TokenLayer::Raw => Some(&self.raw_tokens),
            TokenLayer::Lemma => self.lemma_tokens.as_deref(),
        }
    }
}

/// One time period's documents, sorted by `doc_id`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub corpus_id: String,
    pub documents: Vec<Document>,
}

impl Corpus {
    /// Sorts documents by id and rejects duplicate ids.
    pub fn new(corpus_id: impl Into<String>, mut documents: Vec<Document>) -> Result<Self> {
        let corpus_id = corpus_id.into();
        documents.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        for pair in documents.windows(2) {
            if pair[0].doc_id == pair[1].doc_id {
                return Err(Error::DuplicateDocument {
                    corpus_id,
                    doc_id: pair[0].doc_id.clone(),
                });
            }
        }
        Ok(Self { corpus_id, documents })
    }

    /// Build a raw-only corpus from in-memory lines, one document per line.
    pub fn from_lines<S: AsRef<str>>(corpus_id: impl Into<String>, lines: &[S]) -> Result<Self> {
        let corpus_id = corpus_id.into();
        let documents = numbered_documents("", lines.iter().map(|l| l.as_ref().to_owned()));
        if documents.is_empty() {
            return Err(Error::EmptyCorpus(corpus_id));
        }
        Self::new(corpus_id, documents)
    }

    pub fn document(&self, doc_id: &str) -> Option<&Document> {
        self.documents
            .binary_search_by(|d| d.doc_id.as_str().cmp(doc_id))
            .ok()
            .map(|i| &self.documents[i])
    }

    pub fn has_lemmas(&self) -> bool {
        self.documents.iter().all(|d| d.lemma_tokens.is_some())
    }

    pub fn token_count(&self) -> usize {
        self.documents.iter().map(|d| d.raw_tokens.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    /// A file (or a directory of files) with one document per line.
    #[default]
    Lines,
    /// A directory where every file is one document.
    Directory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TokenLayer {
    #[default]
    Raw,
    Lemma,
}

fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

fn numbered_documents(prefix: &str, lines: impl Iterator<Item = String>) -> Vec<Document> {
    lines
        .enumerate()
        .filter_map(|(i, line)| {
            let raw_tokens = tokenize(&line);
            (!raw_tokens.is_empty()).then(|| Document {
                doc_id: format!("{prefix}{i:08}"),
                raw_tokens,
                lemma_tokens: None,
            })
        })
        .collect()
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Raw text units in deterministic order: `(source name, line number, text)`.
/// For the `Directory` format every file is a single unit with line 0.
fn read_units(path: &Path, format: CorpusFormat) -> Result<Vec<(String, usize, String)>> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        ));
    }
    let mut units = Vec::new();
    match format {
        CorpusFormat::Lines if path.is_file() => {
            for (i, line) in read_text(path)?.lines().enumerate() {
                units.push((String::new(), i, line.to_owned()));
            }
        }
        CorpusFormat::Lines => {
            for file in sorted_files(path)? {
                let name = file_name(&file);
                for (i, line) in read_text(&file)?.lines().enumerate() {
                    units.push((name.clone(), i, line.to_owned()));
                }
            }
        }
        CorpusFormat::Directory => {
            if !path.is_dir() {
                return Err(Error::InvalidArgument(format!("{} is not a directory", path.display())));
            }
            for file in sorted_files(path)? {
                units.push((file_name(&file), 0, read_text(&file)?));
            }
        }
    }
    Ok(units)
}

fn unit_doc_id(format: CorpusFormat, source: &str, line: usize) -> String {
    match format {
        CorpusFormat::Directory => source.to_owned(),
        CorpusFormat::Lines if source.is_empty() => format!("{line:08}"),
        CorpusFormat::Lines => format!("{source}:{line:08}"),
    }
}

/// Load a raw-only corpus.
pub fn load_corpus(path: &Path, corpus_id: &str, format: CorpusFormat) -> Result<Corpus> {
    let documents: Vec<Document> = read_units(path, format)?
        .into_iter()
        .filter_map(|(source, line, text)| {
            let raw_tokens = tokenize(&text);
            (!raw_tokens.is_empty()).then(|| Document {
                doc_id: unit_doc_id(format, &source, line),
                raw_tokens,
                lemma_tokens: None,
            })
        })
        .collect();
    if documents.is_empty() {
        return Err(Error::EmptyCorpus(corpus_id.to_owned()));
    }
    Corpus::new(corpus_id, documents)
}

/// Load a corpus with a parallel lemma layer. Raw and lemma units are
/// paired by position; units whose raw side is empty are skipped together
/// with their lemma counterpart.
pub fn load_corpus_with_lemmas(
    raw_path: &Path,
    lemma_path: &Path,
    corpus_id: &str,
    format: CorpusFormat,
) -> Result<Corpus> {
    let raw = read_units(raw_path, format)?;
    let lemma = read_units(lemma_path, format)?;
    if raw.len() != lemma.len() {
        return Err(Error::DocumentCountMismatch {
            raw: raw.len(),
            lemma: lemma.len(),
        });
    }
    let documents: Vec<Document> = raw
        .into_iter()
        .zip(lemma)
        .filter_map(|((source, line, raw_text), (_, _, lemma_text))| {
            let raw_tokens = tokenize(&raw_text);
            (!raw_tokens.is_empty()).then(|| Document {
                doc_id: unit_doc_id(format, &source, line),
                raw_tokens,
                lemma_tokens: Some(tokenize(&lemma_text)),
            })
        })
        .collect();
    if documents.is_empty() {
        return Err(Error::EmptyCorpus(corpus_id.to_owned()));
    }
    Corpus::new(corpus_id, documents)
}

/// A single token position in one document of one corpus.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Occurrence {
    pub corpus_id: String,
    pub doc_id: String,
    pub token_position: usize,
}

impl Occurrence {
    pub fn new(corpus_id: impl Into<String>, doc_id: impl Into<String>, token_position: usize) -> Self {
        Self {
            corpus_id: corpus_id.into(),
            doc_id: doc_id.into(),
            token_position,
        }
    }

    /// Stable request identifier used on the substituter wire.
    pub fn request_id(&self) -> String {
        format!("{}|{}|{}", self.corpus_id, self.doc_id, self.token_position)
    }
}

/// Term -> occurrences, each list sorted by `(corpus_id, doc_id, token_position)`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OccurrenceIndex {
    pub corpus_ids: Vec<String>,
    pub entries: BTreeMap<String, Vec<Occurrence>>,
}

impl OccurrenceIndex {
    pub fn new(corpus_ids: Vec<String>) -> Self {
        Self {
            corpus_ids,
            entries: BTreeMap::new(),
        }
    }

    pub fn get(&self, term: &str) -> Option<&[Occurrence]> {
        self.entries.get(term).map(Vec::as_slice)
    }

    pub fn contains(&self, term: &str) -> bool {
        self.entries.contains_key(term)
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// The contiguous slice of a term's occurrences in one corpus.
    pub fn occurrences_in(&self, term: &str, corpus_id: &str) -> Option<&[Occurrence]> {
        let all = self.get(term)?;
        let start = all.partition_point(|o| o.corpus_id.as_str() < corpus_id);
        let end = all.partition_point(|o| o.corpus_id.as_str() <= corpus_id);
        Some(&all[start..end])
    }

    /// Keep only the given terms, adding empty lists for absent ones.
    pub fn restricted_to(&self, terms: &BTreeSet<String>) -> Self {
        Self {
            corpus_ids: self.corpus_ids.clone(),
            entries: terms
                .iter()
                .map(|t| (t.clone(), self.entries.get(t).cloned().unwrap_or_default()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `term<TAB>corpus_id<TAB>doc_id<TAB>position`, preceded by a
    /// `#corpora` header naming the corpora in order.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "#corpora\t{}", self.corpus_ids.join("\t"))?;
        for (term, occs) in &self.entries {
            for o in occs {
                writeln!(out, "{term}\t{}\t{}\t{}", o.corpus_id, o.doc_id, o.token_position)?;
            }
        }
        Ok(())
    }

    /// Read an index written by [`write_tsv`](Self::write_tsv). Terms listed
    /// in `terms` but without rows come back as empty lists.
    pub fn read_tsv(path: &Path, terms: Option<&BTreeSet<String>>) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut index = Self::default();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if let Some(rest) = line.strip_prefix("#corpora\t") {
                index.corpus_ids = rest.split('\t').map(str::to_owned).collect();
                continue;
            }
            if line.starts_with('#') || line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::parse(path, n + 1, "expected 4 tab-separated fields"));
            }
            let position = fields[3]
                .parse()
                .map_err(|_| Error::parse(path, n + 1, "bad token position"))?;
            index
                .entries
                .entry(fields[0].to_owned())
                .or_default()
                .push(Occurrence::new(fields[1], fields[2], position));
        }
        if let Some(terms) = terms {
            for t in terms {
                index.entries.entry(t.clone()).or_default();
            }
        }
        for occs in index.entries.values_mut() {
            occs.sort();
        }
        Ok(index)
    }
}

/// Scan one token layer for the given terms. Positions refer to that layer.
pub(crate) fn scan_layer(corpora: &[Corpus], terms: &BTreeSet<String>, layer: TokenLayer) -> Result<OccurrenceIndex> {
    let mut index = OccurrenceIndex::new(corpora.iter().map(|c| c.corpus_id.clone()).collect());
    for t in terms {
        index.entries.insert(t.clone(), Vec::new());
    }
    for corpus in corpora {
        if layer == TokenLayer::Lemma && !corpus.has_lemmas() {
            return Err(Error::MissingLemmaLayer(corpus.corpus_id.clone()));
        }
        let hits: Vec<(&str, Occurrence)> = corpus
            .documents
            .par_iter()
            .flat_map_iter(|doc| {
                let tokens = doc.tokens(layer).unwrap_or_default();
                tokens.iter().enumerate().filter_map(move |(pos, tok)| {
                    terms.get(tok).map(|t| {
                        (
                            t.as_str(),
                            Occurrence::new(corpus.corpus_id.as_str(), doc.doc_id.as_str(), pos),
                        )
                    })
                })
            })
            .collect();
        for (term, occ) in hits {
            if let Some(list) = index.entries.get_mut(term) {
                list.push(occ);
            }
        }
    }
    for occs in index.entries.values_mut() {
        occs.sort();
    }
    Ok(index)
}

/// Index every occurrence of every requested term.
///
/// With `TokenLayer::Lemma` the terms are matched against lemma tokens and
/// then mapped to raw positions through `alignment`; occurrences that do not
/// survive the mapping are dropped.
pub fn build_index(
    corpora: &[Corpus],
    terms: &BTreeSet<String>,
    layer: TokenLayer,
    alignment: Option<(&AlignmentSet, &AlignmentConfig)>,
) -> Result<OccurrenceIndex> {
    match layer {
        TokenLayer::Raw => scan_layer(corpora, terms, TokenLayer::Raw),
        TokenLayer::Lemma => {
            let (alignments, config) = alignment.ok_or(Error::AlignmentRequired)?;
            let lemma_index = scan_layer(corpora, terms, TokenLayer::Lemma)?;
            align::map_term_indices(&lemma_index, corpora, alignments, config)
        }
    }
}

/// Draw up to `cap` occurrences of `term` in `corpus_id`, uniformly without
/// replacement. The result is sorted in index order.
pub fn sample_occurrences(
    index: &OccurrenceIndex,
    term: &str,
    corpus_id: &str,
    cap: usize,
    seed: u64,
) -> Result<Vec<Occurrence>> {
    if cap == 0 {
        return Err(Error::InvalidArgument("sample cap must be at least 1".into()));
    }
    let pool = index
        .occurrences_in(term, corpus_id)
        .ok_or_else(|| Error::UnknownTerm(term.to_owned()))?;
    if pool.len() <= cap {
        return Ok(pool.to_vec());
    }
    let mut rng = seed::rng(seed);
    let mut picked = rand::seq::index::sample(&mut rng, pool.len(), cap).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| pool[i].clone()).collect())
}

/// Per-corpus and union counts for a set of terms.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FrequencyTable {
    pub corpus_ids: Vec<String>,
    /// term -> counts aligned with `corpus_ids`
    pub per_corpus: BTreeMap<String, Vec<u64>>,
    pub union: BTreeMap<String, u64>,
}

impl FrequencyTable {
    pub fn new(corpus_ids: Vec<String>) -> Self {
        Self {
            corpus_ids,
            ..Self::default()
        }
    }

    pub fn insert(&mut self, term: impl Into<String>, counts: Vec<u64>) {
        let term = term.into();
        self.union.insert(term.clone(), counts.iter().sum());
        self.per_corpus.insert(term, counts);
    }

    pub fn count(&self, term: &str, corpus_id: &str) -> u64 {
        let Some(col) = self.corpus_ids.iter().position(|c| c == corpus_id) else {
            return 0;
        };
        self.per_corpus.get(term).map_or(0, |c| c[col])
    }

    /// fr(t): the count summed over all corpora.
    pub fn union_count(&self, term: &str) -> u64 {
        self.union.get(term).copied().unwrap_or(0)
    }

    pub fn contains(&self, term: &str) -> bool {
        self.union.contains_key(term)
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.union.keys().map(String::as_str)
    }

    /// `term<TAB>c1_count<TAB>c2_count<TAB>union` with a `#term` header
    /// naming the corpus columns.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "#term\t{}\tunion", self.corpus_ids.join("\t"))?;
        for (term, counts) in &self.per_corpus {
            let mut line = term.clone();
            for c in counts {
                let _ = write!(line, "\t{c}");
            }
            writeln!(out, "{line}\t{}", self.union[term])?;
        }
        Ok(())
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut table = Self::default();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if let Some(rest) = line.strip_prefix("#term\t") {
                let mut cols: Vec<String> = rest.split('\t').map(str::to_owned).collect();
                cols.pop();
                table.corpus_ids = cols;
                continue;
            }
            if line.starts_with('#') || line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != table.corpus_ids.len() + 2 {
                return Err(Error::parse(path, n + 1, "unexpected column count"));
            }
            let counts = fields[1..fields.len() - 1]
                .iter()
                .map(|f| f.parse::<u64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::parse(path, n + 1, "bad count"))?;
            table.insert(fields[0], counts);
        }
        Ok(table)
    }
}

/// Counts equal the occurrence-list lengths in each corpus.
pub fn term_frequencies(index: &OccurrenceIndex) -> FrequencyTable {
    let mut table = FrequencyTable::new(index.corpus_ids.clone());
    for (term, occs) in &index.entries {
        let counts = index
            .corpus_ids
            .iter()
            .map(|c| occs.iter().filter(|o| &o.corpus_id == c).count() as u64)
            .collect();
        table.insert(term.clone(), counts);
    }
    table
}

/// Count every token type of one layer, used to form the background pool.
pub fn vocabulary_counts(corpora: &[Corpus], layer: TokenLayer) -> Result<FrequencyTable> {
    let mut table = FrequencyTable::new(corpora.iter().map(|c| c.corpus_id.clone()).collect());
    let width = corpora.len();
    let mut counts: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
    for (col, corpus) in corpora.iter().enumerate() {
        if layer == TokenLayer::Lemma && !corpus.has_lemmas() {
            return Err(Error::MissingLemmaLayer(corpus.corpus_id.clone()));
        }
        for doc in &corpus.documents {
            for tok in doc.tokens(layer).unwrap_or_default() {
                counts.entry(tok.as_str()).or_insert_with(|| vec![0; width])[col] += 1;
            }
        }
    }
    for (term, c) in counts {
        table.insert(term, c);
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackgroundSelection {
    pub terms: BTreeSet<String>,
    pub pool_size: usize,
    /// Set when the eligible pool was smaller than requested.
    pub warning: Option<String>,
}

/// Pick `n` background terms at random among eligible terms: union count
/// at least `min_count`, present in every corpus, not a target and not a
/// stopword.
pub fn select_background_terms(
    freq: &FrequencyTable,
    n: usize,
    targets: &BTreeSet<String>,
    min_count: u64,
    stopwords: &StopwordSet,
    seed: u64,
) -> BackgroundSelection {
    let pool: Vec<&str> = freq
        .per_corpus
        .iter()
        .filter(|(term, counts)| {
            freq.union[*term] >= min_count
                && counts.iter().all(|&c| c > 0)
                && !targets.contains(*term)
                && !stopwords.contains(term)
        })
        .map(|(term, _)| term.as_str())
        .collect();
    if pool.len() <= n {
        let warning = (pool.len() < n).then(|| {
            format!(
                "background pool has {} eligible terms, fewer than the {} requested",
                pool.len(),
                n
            )
        });
        if let Some(w) = &warning {
            log::warn!("{w}");
        }
        return BackgroundSelection {
            terms: pool.iter().map(|t| (*t).to_owned()).collect(),
            pool_size: pool.len(),
            warning,
        };
    }
    let mut rng = seed::rng(seed);
    let terms = rand::seq::index::sample(&mut rng, pool.len(), n)
        .into_iter()
        .map(|i| pool[i].to_owned())
        .collect();
    BackgroundSelection {
        terms,
        pool_size: pool.len(),
        warning: None,
    }
}
