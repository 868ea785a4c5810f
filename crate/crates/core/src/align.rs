//! Lemma-to-raw token alignment.
//!
//! Targets in lemmatized corpora are indexed on the lemma layer, but the
//! substituter has to see surface text. Each lemmatized document is aligned
//! to its raw counterpart with a cascade:
//!
//! 1. tokens occurring exactly once in both sequences become anchors,
//!    keeping the largest order-consistent subset (longest increasing
//!    subsequence of the anchor pairs);
//! 2. anchoring is repeated inside every gap between adjacent anchors;
//! 3. the remaining gaps are aligned by a minimum-cost edit alignment where
//!    pairing two tokens costs their normalized character edit distance and
//!    leaving a token unpaired costs [`PAD_COST`];
//! 4. a correction pass tries inserting one pad at every column of each gap
//!    on either side and keeps the cheapest result, which repairs off-by-one
//!    shifts. Anchor columns are never moved.
//!
//! Gaps larger than [`MAX_DP_CELLS`] are paired positionally instead of by
//! the quadratic edit alignment and rely on the correction pass alone.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Occurrence, OccurrenceIndex};
use crate::error::{Error, Result};

/// Cost of leaving a token on either side without a partner.
pub const PAD_COST: f64 = 1.0;

/// Largest gap (raw length times lemma length) aligned by full edit alignment.
pub const MAX_DP_CELLS: usize = 4_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentMap {
    pub doc_id: String,
    /// Entry `j` is the raw index aligned to lemma token `j`, or `None` (pad).
    pub lemma_to_raw: Vec<Option<usize>>,
}

impl AlignmentMap {
    pub fn aligned_count(&self) -> usize {
        self.lemma_to_raw.iter().filter(|e| e.is_some()).count()
    }

    pub fn is_monotone(&self) -> bool {
        let mut last: Option<usize> = None;
        for r in self.lemma_to_raw.iter().flatten() {
            if last.is_some_and(|l| *r <= l) {
                return false;
            }
            last = Some(*r);
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    pub min_token_length: usize,
    pub min_form_share: f64,
    pub enforce_first_letter: bool,
    /// `(lemma_prefix, allowed_prefix)`: a lemma starting with the first may
    /// surface as a form starting with the second.
    pub first_letter_exceptions: Vec<(String, String)>,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            min_token_length: 2,
            min_form_share: 0.0002,
            enforce_first_letter: true,
            first_letter_exceptions: Vec::new(),
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_form_share) {
            return Err(Error::Config(format!(
                "min_form_share must lie in [0, 1], got {}",
                self.min_form_share
            )));
        }
        Ok(())
    }
}

/// Load `lemma_prefix<TAB>allowed_prefix` pairs, one per line.
pub fn load_exceptions(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (lemma, allowed) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, n + 1, "expected lemma_prefix<TAB>allowed_prefix"))?;
        pairs.push((lemma.to_lowercase(), allowed.to_lowercase()));
    }
    Ok(pairs)
}

/// Default punctuation predicate: no alphanumeric character at all.
pub fn is_punctuation(token: &str) -> bool {
    !token.chars().any(char::is_alphanumeric)
}

/// Character edit distance divided by the longer token's length.
pub fn token_cost(a: &str, b: &str) -> f64 {
    if a == b {
        return 0.0;
    }
    let longest = a.chars().count().max(b.chars().count());
    strsim::levenshtein(a, b) as f64 / longest as f64
}

type Column = (Option<usize>, Option<usize>);

fn column_cost(raw: &[&str], lemma: &[&str], col: Column) -> f64 {
    match col {
        (Some(r), Some(l)) => token_cost(raw[r], lemma[l]),
        (None, None) => 0.0,
        _ => PAD_COST,
    }
}

/// Total cost of an alignment expressed as a lemma->raw map.
pub fn alignment_cost<S: AsRef<str>>(raw: &[S], lemma: &[S], lemma_to_raw: &[Option<usize>]) -> f64 {
    let raw: Vec<&str> = raw.iter().map(AsRef::as_ref).collect();
    let lemma: Vec<&str> = lemma.iter().map(AsRef::as_ref).collect();
    let mut used = vec![false; raw.len()];
    let mut cost = 0.0;
    for (l, r) in lemma_to_raw.iter().enumerate() {
        match r {
            Some(r) => {
                used[*r] = true;
                cost += token_cost(raw[*r], lemma[l]);
            }
            None => cost += PAD_COST,
        }
    }
    cost + used.iter().filter(|u| !**u).count() as f64 * PAD_COST
}

/// Pairs `(raw_index, lemma_index)` of the longest chain strictly
/// increasing on both sides. Input must be sorted by lemma index.
fn longest_consistent_chain(pairs: &[(usize, usize)]) -> Vec<(usize, usize)> {
    // tails[k]: index into `pairs` of the smallest raw tail of a chain of length k+1
    let mut tails: Vec<usize> = Vec::new();
    let mut prev: Vec<Option<usize>> = vec![None; pairs.len()];
    for (i, &(r, _)) in pairs.iter().enumerate() {
        let k = tails.partition_point(|&t| pairs[t].0 < r);
        if k > 0 {
            prev[i] = Some(tails[k - 1]);
        }
        if k == tails.len() {
            tails.push(i);
        } else {
            tails[k] = i;
        }
    }
    let mut chain = Vec::with_capacity(tails.len());
    let mut cur = tails.last().copied();
    while let Some(i) = cur {
        chain.push(pairs[i]);
        cur = prev[i];
    }
    chain.reverse();
    chain
}

/// Anchors occurring exactly once on each side of the given windows.
fn unique_pairs(raw: &[&str], lemma: &[&str], r0: usize, r1: usize, l0: usize, l1: usize) -> Vec<(usize, usize)> {
    let mut raw_seen: HashMap<&str, (usize, usize)> = HashMap::new();
    for (i, tok) in raw[r0..r1].iter().enumerate() {
        let e = raw_seen.entry(tok).or_insert((0, r0 + i));
        e.0 += 1;
    }
    let mut lemma_seen: HashMap<&str, (usize, usize)> = HashMap::new();
    for (j, tok) in lemma[l0..l1].iter().enumerate() {
        let e = lemma_seen.entry(tok).or_insert((0, l0 + j));
        e.0 += 1;
    }
    let mut pairs: Vec<(usize, usize)> = lemma_seen
        .iter()
        .filter(|(_, (n, _))| *n == 1)
        .filter_map(|(tok, (_, j))| match raw_seen.get(tok) {
            Some((1, i)) => Some((*i, *j)),
            _ => None,
        })
        .collect();
    pairs.sort_by_key(|p| p.1);
    pairs
}

/// Steps 1 and 2: recursive unique-token anchoring. Returns anchors sorted.
fn find_anchors(raw: &[&str], lemma: &[&str]) -> Vec<(usize, usize)> {
    let mut anchors = Vec::new();
    let mut work = vec![(0, raw.len(), 0, lemma.len())];
    while let Some((r0, r1, l0, l1)) = work.pop() {
        if r0 >= r1 || l0 >= l1 {
            continue;
        }
        let chain = longest_consistent_chain(&unique_pairs(raw, lemma, r0, r1, l0, l1));
        if chain.is_empty() {
            continue;
        }
        let (mut pr, mut pl) = (r0, l0);
        for &(r, l) in &chain {
            work.push((pr, r, pl, l));
            pr = r + 1;
            pl = l + 1;
        }
        work.push((pr, r1, pl, l1));
        anchors.extend(chain);
    }
    anchors.sort_by_key(|a| a.1);
    anchors
}

/// Steps 3 and 4 for one gap between anchors.
fn align_gap(raw: &[&str], lemma: &[&str], r0: usize, r1: usize, l0: usize, l1: usize, out: &mut Vec<Column>) {
    let mut cols = Vec::with_capacity((r1 - r0).max(l1 - l0));
    if (r1 - r0).saturating_mul(l1 - l0) > MAX_DP_CELLS {
        log::debug!("gap of {}x{} tokens aligned positionally", r1 - r0, l1 - l0);
        align_positional(r0, r1, l0, l1, &mut cols);
    } else {
        align_segment(raw, lemma, r0, r1, l0, l1, &mut cols);
    }
    out.extend(correct_off_by_one(raw, lemma, cols));
}

fn align_positional(r0: usize, r1: usize, l0: usize, l1: usize, out: &mut Vec<Column>) {
    let paired = (r1 - r0).min(l1 - l0);
    out.extend((0..paired).map(|i| (Some(r0 + i), Some(l0 + i))));
    out.extend((r0 + paired..r1).map(|r| (Some(r), None)));
    out.extend((l0 + paired..l1).map(|l| (None, Some(l))));
}

/// Step 3: minimum-cost edit alignment of one gap.
fn align_segment(raw: &[&str], lemma: &[&str], r0: usize, r1: usize, l0: usize, l1: usize, out: &mut Vec<Column>) {
    let n = r1 - r0;
    let m = l1 - l0;
    if n == 0 || m == 0 {
        out.extend((r0..r1).map(|r| (Some(r), None)));
        out.extend((l0..l1).map(|l| (None, Some(l))));
        return;
    }
    let w = m + 1;
    let mut cost = vec![0.0f64; (n + 1) * w];
    // 0 diagonal, 1 lemma pad (move in j), 2 raw unpaired (move in i)
    let mut step = vec![0u8; (n + 1) * w];
    for i in 1..=n {
        cost[i * w] = i as f64 * PAD_COST;
        step[i * w] = 2;
    }
    for j in 1..=m {
        cost[j] = j as f64 * PAD_COST;
        step[j] = 1;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = cost[(i - 1) * w + j - 1] + token_cost(raw[r0 + i - 1], lemma[l0 + j - 1]);
            let left = cost[i * w + j - 1] + PAD_COST;
            let up = cost[(i - 1) * w + j] + PAD_COST;
            let (best, s) = if diag <= left && diag <= up {
                (diag, 0)
            } else if left <= up {
                (left, 1)
            } else {
                (up, 2)
            };
            cost[i * w + j] = best;
            step[i * w + j] = s;
        }
    }
    let mut cols = Vec::with_capacity(n + m);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        match step[i * w + j] {
            0 => {
                cols.push((Some(r0 + i - 1), Some(l0 + j - 1)));
                i -= 1;
                j -= 1;
            }
            1 => {
                cols.push((None, Some(l0 + j - 1)));
                j -= 1;
            }
            _ => {
                cols.push((Some(r0 + i - 1), None));
                i -= 1;
            }
        }
    }
    cols.reverse();
    out.extend(cols);
}

/// Step 4: try one extra pad at every column on either side; keep the best.
/// The column displaced past the end becomes a trailing pad column.
fn correct_off_by_one(raw: &[&str], lemma: &[&str], cols: Vec<Column>) -> Vec<Column> {
    let len = cols.len();
    if len < 2 {
        return cols;
    }
    let a: Vec<Option<usize>> = cols.iter().map(|c| c.0).collect();
    let b: Vec<Option<usize>> = cols.iter().map(|c| c.1).collect();
    let cc = |r: Option<usize>, l: Option<usize>| column_cost(raw, lemma, (r, l));

    let mut prefix = vec![0.0; len + 1];
    for i in 0..len {
        prefix[i + 1] = prefix[i] + cc(a[i], b[i]);
    }
    let original = prefix[len];
    // shifted_b[q] = sum over i >= q of cost(a[i], b[i-1]); shifted_a mirrors it
    let mut shifted_b = vec![0.0; len + 1];
    let mut shifted_a = vec![0.0; len + 1];
    for i in (1..len).rev() {
        shifted_b[i] = shifted_b[i + 1] + cc(a[i], b[i - 1]);
        shifted_a[i] = shifted_a[i + 1] + cc(a[i - 1], b[i]);
    }

    // (cost, position, pad on lemma side)
    let mut best: Option<(f64, usize, bool)> = None;
    for p in 0..len {
        let pad_lemma = prefix[p] + cc(a[p], None) + shifted_b[p + 1] + cc(None, b[len - 1]);
        let pad_raw = prefix[p] + cc(None, b[p]) + shifted_a[p + 1] + cc(a[len - 1], None);
        for (c, side) in [(pad_lemma, true), (pad_raw, false)] {
            if best.is_none_or(|(bc, _, _)| c < bc) {
                best = Some((c, p, side));
            }
        }
    }
    let Some((cost, p, pad_lemma)) = best else {
        return cols;
    };
    if cost >= original - 1e-12 {
        return cols;
    }
    let (mut a2, mut b2) = (a, b);
    if pad_lemma {
        b2.insert(p, None);
        a2.push(None);
    } else {
        a2.insert(p, None);
        b2.push(None);
    }
    a2.into_iter()
        .zip(b2)
        .filter(|c| c.0.is_some() || c.1.is_some())
        .collect()
}

/// Align punctuation-free token sequences; entry `j` of the result is the
/// raw index paired with lemma token `j`.
pub fn align_tokens<S: AsRef<str>>(raw: &[S], lemma: &[S]) -> Vec<Option<usize>> {
    let raw: Vec<&str> = raw.iter().map(AsRef::as_ref).collect();
    let lemma: Vec<&str> = lemma.iter().map(AsRef::as_ref).collect();
    let anchors = find_anchors(&raw, &lemma);

    let mut cols: Vec<Column> = Vec::with_capacity(raw.len().max(lemma.len()));
    let (mut pr, mut pl) = (0, 0);
    for &(r, l) in &anchors {
        align_gap(&raw, &lemma, pr, r, pl, l, &mut cols);
        cols.push((Some(r), Some(l)));
        pr = r + 1;
        pl = l + 1;
    }
    align_gap(&raw, &lemma, pr, raw.len(), pl, lemma.len(), &mut cols);

    let mut lemma_to_raw = vec![None; lemma.len()];
    for (r, l) in cols {
        if let (Some(r), Some(l)) = (r, l) {
            lemma_to_raw[l] = Some(r);
        }
    }
    lemma_to_raw
}

/// Align one document. Punctuation tokens are removed from both sides
/// before alignment; lemma punctuation maps to pad and raw indices refer
/// to the original (unstripped) raw sequence.
pub fn align_document<S, P>(doc_id: &str, raw: &[S], lemma: &[S], is_punct: P) -> AlignmentMap
where
    S: AsRef<str>,
    P: Fn(&str) -> bool,
{
    fn keep<'a, S: AsRef<str>>(toks: &'a [S], is_punct: &impl Fn(&str) -> bool) -> (Vec<usize>, Vec<&'a str>) {
        toks.iter()
            .enumerate()
            .filter(|(_, t)| !is_punct(t.as_ref()))
            .map(|(i, t)| (i, t.as_ref()))
            .unzip()
    }
    let (raw_orig, raw_kept) = keep(raw, &is_punct);
    let (lemma_orig, lemma_kept) = keep(lemma, &is_punct);
    let inner = align_tokens(&raw_kept, &lemma_kept);
    let mut lemma_to_raw = vec![None; lemma.len()];
    for (j, r) in inner.into_iter().enumerate() {
        lemma_to_raw[lemma_orig[j]] = r.map(|r| raw_orig[r]);
    }
    AlignmentMap {
        doc_id: doc_id.to_owned(),
        lemma_to_raw,
    }
}

/// Alignments of every document, keyed by corpus then document.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AlignmentSet {
    pub corpora: BTreeMap<String, BTreeMap<String, AlignmentMap>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentStats {
    pub documents: usize,
    pub lemma_tokens: usize,
    pub aligned: usize,
    pub padded: usize,
}

impl AlignmentStats {
    pub fn aligned_share(&self) -> f64 {
        if self.lemma_tokens == 0 {
            1.0
        } else {
            self.aligned as f64 / self.lemma_tokens as f64
        }
    }

    pub fn pad_share(&self) -> f64 {
        if self.lemma_tokens == 0 {
            0.0
        } else {
            self.padded as f64 / self.lemma_tokens as f64
        }
    }
}

impl AlignmentSet {
    pub fn insert(&mut self, corpus_id: &str, map: AlignmentMap) {
        self.corpora
            .entry(corpus_id.to_owned())
            .or_default()
            .insert(map.doc_id.clone(), map);
    }

    pub fn get(&self, corpus_id: &str, doc_id: &str) -> Option<&AlignmentMap> {
        self.corpora.get(corpus_id)?.get(doc_id)
    }

    pub fn len(&self) -> usize {
        self.corpora.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> AlignmentStats {
        let mut s = AlignmentStats {
            documents: 0,
            lemma_tokens: 0,
            aligned: 0,
            padded: 0,
        };
        for map in self.corpora.values().flat_map(BTreeMap::values) {
            s.documents += 1;
            s.lemma_tokens += map.lemma_to_raw.len();
            s.aligned += map.aligned_count();
        }
        s.padded = s.lemma_tokens - s.aligned;
        s
    }

    /// `doc_id<TAB>lemma_index<TAB>raw_index_or_-1` for one corpus.
    pub fn write_corpus_tsv<W: Write>(&self, corpus_id: &str, mut out: W) -> std::io::Result<()> {
        if let Some(docs) = self.corpora.get(corpus_id) {
            for (doc_id, map) in docs {
                for (j, r) in map.lemma_to_raw.iter().enumerate() {
                    match r {
                        Some(r) => writeln!(out, "{doc_id}\t{j}\t{r}")?,
                        None => writeln!(out, "{doc_id}\t{j}\t-1")?,
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_corpus_tsv(&mut self, corpus_id: &str, path: &Path) -> Result<()> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let docs = self.corpora.entry(corpus_id.to_owned()).or_default();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.starts_with('#') || line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::parse(path, n + 1, "expected 3 tab-separated fields"));
            }
            let j: usize = fields[1]
                .parse()
                .map_err(|_| Error::parse(path, n + 1, "bad lemma index"))?;
            let r: i64 = fields[2]
                .parse()
                .map_err(|_| Error::parse(path, n + 1, "bad raw index"))?;
            let map = docs.entry(fields[0].to_owned()).or_insert_with(|| AlignmentMap {
                doc_id: fields[0].to_owned(),
                lemma_to_raw: Vec::new(),
            });
            if j != map.lemma_to_raw.len() {
                return Err(Error::parse(path, n + 1, "lemma indices must be consecutive"));
            }
            map.lemma_to_raw.push(usize::try_from(r).ok());
        }
        Ok(())
    }
}

/// Align every document of every corpus in parallel.
pub fn align_corpora(corpora: &[Corpus]) -> Result<AlignmentSet> {
    let mut set = AlignmentSet::default();
    for corpus in corpora {
        if !corpus.has_lemmas() {
            return Err(Error::MissingLemmaLayer(corpus.corpus_id.clone()));
        }
        let maps: Vec<AlignmentMap> = corpus
            .documents
            .par_iter()
            .map(|doc| {
                let lemma = doc.lemma_tokens.as_deref().unwrap_or_default();
                align_document(&doc.doc_id, &doc.raw_tokens, lemma, is_punctuation)
            })
            .collect();
        for map in maps {
            set.insert(&corpus.corpus_id, map);
        }
    }
    Ok(set)
}

fn first_letter_ok(term: &str, form: &str, config: &AlignmentConfig) -> bool {
    if !config.enforce_first_letter {
        return true;
    }
    let lemma = term.to_lowercase();
    let form = form.to_lowercase();
    if lemma.chars().next() == form.chars().next() {
        return true;
    }
    config
        .first_letter_exceptions
        .iter()
        .any(|(lp, ap)| lemma.starts_with(lp.as_str()) && form.starts_with(ap.as_str()))
}

/// Raw forms accepted for a lemma: long enough, frequent enough among the
/// lemma's aligned forms, and sharing the lemma's first letter (subject to
/// configured exceptions).
pub fn filter_aligned_tokens(
    term: &str,
    aligned_forms: &BTreeMap<String, u64>,
    config: &AlignmentConfig,
) -> BTreeSet<String> {
    let total: u64 = aligned_forms.values().sum();
    aligned_forms
        .iter()
        .filter(|(form, &count)| {
            form.chars().count() >= config.min_token_length
                && total > 0
                && count as f64 / total as f64 >= config.min_form_share
                && first_letter_ok(term, form, config)
        })
        .map(|(form, _)| form.clone())
        .collect()
}

/// Re-point lemma-layer occurrences at raw positions. Occurrences that map
/// to a pad or whose raw form is rejected by [`filter_aligned_tokens`] are
/// dropped.
pub fn map_term_indices(
    index_on_lemmas: &OccurrenceIndex,
    corpora: &[Corpus],
    alignments: &AlignmentSet,
    config: &AlignmentConfig,
) -> Result<OccurrenceIndex> {
    let mut out = OccurrenceIndex::new(index_on_lemmas.corpus_ids.clone());
    for (term, occs) in &index_on_lemmas.entries {
        let mut mapped: Vec<(Occurrence, &str)> = Vec::with_capacity(occs.len());
        for occ in occs {
            let map = alignments
                .get(&occ.corpus_id, &occ.doc_id)
                .ok_or_else(|| Error::MissingAlignment {
                    corpus_id: occ.corpus_id.clone(),
                    doc_id: occ.doc_id.clone(),
                })?;
            let doc = corpora
                .iter()
                .find(|c| c.corpus_id == occ.corpus_id)
                .and_then(|c| c.document(&occ.doc_id))
                .ok_or_else(|| Error::UnknownCorpus(format!("{}/{}", occ.corpus_id, occ.doc_id)))?;
            let entry = map
                .lemma_to_raw
                .get(occ.token_position)
                .ok_or(Error::PositionOutOfRange {
                    doc_id: occ.doc_id.clone(),
                    position: occ.token_position,
                    len: map.lemma_to_raw.len(),
                })?;
            if let Some(raw_pos) = *entry {
                let form = doc.raw_tokens.get(raw_pos).ok_or(Error::PositionOutOfRange {
                    doc_id: occ.doc_id.clone(),
                    position: raw_pos,
                    len: doc.raw_tokens.len(),
                })?;
                mapped.push((
                    Occurrence::new(occ.corpus_id.as_str(), occ.doc_id.as_str(), raw_pos),
                    form.as_str(),
                ));
            }
        }
        let mut forms: BTreeMap<String, u64> = BTreeMap::new();
        for (_, form) in &mapped {
            *forms.entry((*form).to_owned()).or_default() += 1;
        }
        let accepted = filter_aligned_tokens(term, &forms, config);
        let mut kept: Vec<Occurrence> = mapped
            .into_iter()
            .filter(|(_, form)| accepted.contains(*form))
            .map(|(o, _)| o)
            .collect();
        kept.sort();
        out.entries.insert(term.clone(), kept);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_index, Document, TokenLayer};
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    /// Every monotone partial matching of `lemma` onto `raw`, by brute force.
    fn all_monotone(n_raw: usize, n_lemma: usize) -> Vec<Vec<Option<usize>>> {
        fn rec(
            j: usize,
            next_raw: usize,
            n_raw: usize,
            n_lemma: usize,
            cur: &mut Vec<Option<usize>>,
            out: &mut Vec<Vec<Option<usize>>>,
        ) {
            if j == n_lemma {
                out.push(cur.clone());
                return;
            }
            cur.push(None);
            rec(j + 1, next_raw, n_raw, n_lemma, cur, out);
            cur.pop();
            for r in next_raw..n_raw {
                cur.push(Some(r));
                rec(j + 1, r + 1, n_raw, n_lemma, cur, out);
                cur.pop();
            }
        }
        let mut out = Vec::new();
        rec(0, 0, n_raw, n_lemma, &mut Vec::new(), &mut out);
        out
    }

    #[test]
    fn inflected_sentence() {
        let map = align_tokens(&toks("the planes were flying"), &toks("the plane be fly"));
        assert_eq!(map, vec![Some(0), Some(1), Some(2), Some(3)]);
    }

    #[test]
    fn identical_sequences_give_identity() {
        let t = toks("a b a c b d");
        assert_eq!(align_tokens(&t, &t), (0..6).map(Some).collect::<Vec<_>>());
    }

    #[test]
    fn contraction_takes_a_cheapest_partner() {
        let raw = toks("can not go");
        let lemma = toks("cannot go");
        let map = align_tokens(&raw, &lemma);
        assert_eq!(map[1], Some(2), "go anchors");
        assert!(map[0] == Some(0) || map[0] == Some(1));
        let best = all_monotone(3, 2)
            .iter()
            .map(|m| alignment_cost(&raw, &lemma, m))
            .fold(f64::INFINITY, f64::min);
        assert!((alignment_cost(&raw, &lemma, &map) - best).abs() < 1e-12);
    }

    #[test]
    fn inconsistent_anchors_keep_the_majority() {
        // x is unique on both sides but out of order with a, b, c, y
        let raw = toks("a b c y x");
        let lemma = toks("a x b c y");
        let pairs = unique_pairs(
            &raw.iter().map(String::as_str).collect::<Vec<_>>(),
            &lemma.iter().map(String::as_str).collect::<Vec<_>>(),
            0,
            5,
            0,
            5,
        );
        let chain = longest_consistent_chain(&pairs);
        assert_eq!(chain, vec![(0, 0), (1, 2), (2, 3), (3, 4)]);
        let map = align_tokens(&raw, &lemma);
        assert_eq!(map, vec![Some(0), None, Some(1), Some(2), Some(3)]);
    }

    #[test]
    fn punctuation_is_skipped_but_indices_preserved() {
        let map = align_document(
            "d",
            &toks("\" The plane , flew .")[..],
            &toks("the plane fly")[..],
            is_punctuation,
        );
        assert_eq!(map.lemma_to_raw, vec![Some(1), Some(2), Some(4)]);
        let map = align_document("d", &toks("a b"), &toks("a , b"), is_punctuation);
        assert_eq!(map.lemma_to_raw, vec![Some(0), None, Some(1)]);
    }

    #[test]
    fn correction_fixes_a_shifted_tail() {
        let raw: Vec<&str> = vec!["aaaa", "bbbb", "cccc"];
        let lemma: Vec<&str> = vec!["aaaa", "bbbb", "cccc"];
        // hand-built alignment with lemma shifted right by one column
        let cols = vec![(Some(0), None), (Some(1), Some(0)), (Some(2), Some(1)), (None, Some(2))];
        let fixed = correct_off_by_one(&raw, &lemma, cols);
        assert_eq!(fixed, vec![(Some(0), Some(0)), (Some(1), Some(1)), (Some(2), Some(2))]);
    }

    #[test]
    fn positional_fallback_is_corrected() {
        let raw: Vec<&str> = vec!["xx", "alpha", "beta", "gamma"];
        let lemma: Vec<&str> = vec!["alpha", "beta", "gamma"];
        let mut cols = Vec::new();
        align_positional(0, 4, 0, 3, &mut cols);
        let fixed = correct_off_by_one(&raw, &lemma, cols);
        assert_eq!(
            fixed,
            vec![
                (Some(0), None),
                (Some(1), Some(0)),
                (Some(2), Some(1)),
                (Some(3), Some(2))
            ]
        );
    }

    #[test]
    fn filter_applies_all_three_rules() {
        let forms: BTreeMap<String, u64> = [("walked", 500), ("walking", 300), ("ambulated", 10), ("w", 5)]
            .into_iter()
            .map(|(f, c)| (f.to_owned(), c))
            .collect();
        let kept = filter_aligned_tokens("walk", &forms, &AlignmentConfig::default());
        assert_eq!(kept, ["walked", "walking"].into_iter().map(String::from).collect());
    }

    #[test]
    fn first_letter_exception() {
        let forms: BTreeMap<String, u64> = [("jubeo".to_owned(), 10), ("iubet".to_owned(), 10)].into();
        let strict = filter_aligned_tokens("iubeo", &forms, &AlignmentConfig::default());
        assert!(!strict.contains("jubeo"));
        let config = AlignmentConfig {
            first_letter_exceptions: vec![("i".into(), "j".into())],
            ..AlignmentConfig::default()
        };
        let relaxed = filter_aligned_tokens("iubeo", &forms, &config);
        assert!(relaxed.contains("jubeo"));
        assert!(relaxed.contains("iubet"));
    }

    #[test]
    fn share_threshold_edge() {
        let forms: BTreeMap<String, u64> = [("rare".to_owned(), 1), ("run".to_owned(), 99_999)].into();
        let kept = filter_aligned_tokens(
            "run",
            &forms,
            &AlignmentConfig {
                enforce_first_letter: false,
                ..AlignmentConfig::default()
            },
        );
        assert!(!kept.contains("rare"));
        assert!(kept.contains("run"));
    }

    #[test]
    fn exceptions_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("exc.tsv");
        std::fs::write(&p, "# latin\ni\tj\nU\tV\n").unwrap();
        assert_eq!(
            load_exceptions(&p).unwrap(),
            vec![("i".into(), "j".into()), ("u".into(), "v".into())]
        );
        std::fs::write(&p, "broken\n").unwrap();
        assert!(load_exceptions(&p).is_err());
    }

    fn lemma_corpus(docs: &[(&str, &str)]) -> Corpus {
        Corpus::new(
            "C1",
            docs.iter()
                .enumerate()
                .map(|(i, (raw, lemma))| Document {
                    doc_id: format!("d{i}"),
                    raw_tokens: toks(raw),
                    lemma_tokens: Some(toks(lemma)),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn lemma_index_points_at_raw_forms() {
        let corpus = lemma_corpus(&[("birds flew south", "bird fly south"), ("they fly", "they fly")]);
        let set = align_corpora(std::slice::from_ref(&corpus)).unwrap();
        let terms: BTreeSet<String> = ["fly".to_owned()].into();
        let idx = build_index(
            &[corpus],
            &terms,
            TokenLayer::Lemma,
            Some((&set, &AlignmentConfig::default())),
        )
        .unwrap();
        let occ = idx.get("fly").unwrap();
        assert_eq!(occ.len(), 2);
        assert_eq!((occ[0].doc_id.as_str(), occ[0].token_position), ("d0", 1));
        assert_eq!((occ[1].doc_id.as_str(), occ[1].token_position), ("d1", 1));
    }

    #[test]
    fn pads_and_missing_alignments() {
        let corpus = lemma_corpus(&[("a b", "a x b")]);
        let mut lemma_index = OccurrenceIndex::new(vec!["C1".into()]);
        lemma_index
            .entries
            .insert("x".into(), vec![Occurrence::new("C1", "d0", 1)]);
        lemma_index.entries.insert("ab".into(), vec![]);
        let mut set = AlignmentSet::default();
        set.insert(
            "C1",
            AlignmentMap {
                doc_id: "d0".into(),
                lemma_to_raw: vec![Some(0), None, Some(1)],
            },
        );
        let out = map_term_indices(
            &lemma_index,
            std::slice::from_ref(&corpus),
            &set,
            &AlignmentConfig::default(),
        )
        .unwrap();
        assert!(out.get("x").unwrap().is_empty());

        let empty = AlignmentSet::default();
        let err = map_term_indices(&lemma_index, &[corpus], &empty, &AlignmentConfig::default()).unwrap_err();
        assert!(matches!(err, Error::MissingAlignment { .. }));
    }

    #[test]
    fn planted_bad_forms_are_dropped() {
        // 100 occurrences of lemma "go": 97 align to "goes", 3 to a wrong token
        let docs: Vec<(String, String)> = (0..100)
            .map(|i| {
                if i % 33 == 5 {
                    ("xx goes".to_owned(), "go".to_owned())
                } else {
                    ("he goes".to_owned(), "he go".to_owned())
                }
            })
            .collect();
        let corpus = Corpus::new(
            "C1",
            docs.iter()
                .enumerate()
                .map(|(i, (r, l))| Document {
                    doc_id: format!("{i:03}"),
                    raw_tokens: toks(r),
                    lemma_tokens: Some(toks(l)),
                })
                .collect(),
        )
        .unwrap();
        let mut set = AlignmentSet::default();
        for (i, (_, l)) in docs.iter().enumerate() {
            // planted: the bad documents pair "go" with "xx"
            let map = if l == "go" {
                vec![Some(0)]
            } else {
                vec![Some(0), Some(1)]
            };
            set.insert(
                "C1",
                AlignmentMap {
                    doc_id: format!("{i:03}"),
                    lemma_to_raw: map,
                },
            );
        }
        let terms: BTreeSet<String> = ["go".to_owned()].into();
        let lemma_index = crate::corpus::scan_layer(std::slice::from_ref(&corpus), &terms, TokenLayer::Lemma).unwrap();
        assert_eq!(lemma_index.get("go").unwrap().len(), 100);
        let out = map_term_indices(&lemma_index, &[corpus], &set, &AlignmentConfig::default()).unwrap();
        let expected = docs.iter().filter(|(_, l)| l != "go").count();
        assert_eq!(expected, 97);
        assert_eq!(out.get("go").unwrap().len(), expected);
    }

    #[test]
    fn tsv_round_trip() {
        let mut set = AlignmentSet::default();
        set.insert(
            "C1",
            AlignmentMap {
                doc_id: "d0".into(),
                lemma_to_raw: vec![Some(0), None, Some(2)],
            },
        );
        set.insert(
            "C1",
            AlignmentMap {
                doc_id: "d1".into(),
                lemma_to_raw: vec![Some(1)],
            },
        );
        let mut buf = Vec::new();
        set.write_corpus_tsv("C1", &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "d0\t0\t0\nd0\t1\t-1\nd0\t2\t2\nd1\t0\t1\n"
        );
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.tsv");
        std::fs::write(&p, buf).unwrap();
        let mut back = AlignmentSet::default();
        back.read_corpus_tsv("C1", &p).unwrap();
        assert_eq!(back, set);
        let stats = set.stats();
        assert_eq!(
            (stats.documents, stats.lemma_tokens, stats.aligned, stats.padded),
            (2, 4, 3, 1)
        );
    }

    fn word() -> impl Strategy<Value = String> {
        "[a-e]{1,4}"
    }

    proptest! {
        #[test]
        fn output_is_monotone(raw in prop::collection::vec(word(), 1..25), lemma in prop::collection::vec(word(), 1..25)) {
            let map = AlignmentMap { doc_id: "d".into(), lemma_to_raw: align_tokens(&raw, &lemma) };
            prop_assert_eq!(map.lemma_to_raw.len(), lemma.len());
            prop_assert!(map.is_monotone());
            prop_assert!(map.lemma_to_raw.iter().flatten().all(|r| *r < raw.len()));
        }

        #[test]
        fn unique_tokens_align_to_themselves(n in 1usize..40) {
            let t: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
            prop_assert_eq!(align_tokens(&t, &t), (0..n).map(Some).collect::<Vec<_>>());
        }

        #[test]
        fn consistent_anchors_are_kept(raw in prop::collection::vec(word(), 1..20), lemma in prop::collection::vec(word(), 1..20)) {
            let count = |v: &[String], t: &str| v.iter().filter(|x| x.as_str() == t).count();
            let pairs: Vec<(usize, usize)> = lemma.iter().enumerate()
                .filter(|(_, t)| count(&lemma, t) == 1 && count(&raw, t) == 1)
                .map(|(j, t)| (raw.iter().position(|x| x == t).unwrap(), j))
                .collect();
            let map = align_tokens(&raw, &lemma);
            for &(i, j) in &pairs {
                let consistent = pairs.iter().all(|&(i2, j2)| (i2 < i) == (j2 < j));
                if consistent {
                    prop_assert_eq!(map[j], Some(i));
                }
            }
        }

        #[test]
        fn segment_alignment_is_optimal(raw in prop::collection::vec(word(), 1..5), lemma in prop::collection::vec(word(), 1..5)) {
            let r: Vec<&str> = raw.iter().map(String::as_str).collect();
            let l: Vec<&str> = lemma.iter().map(String::as_str).collect();
            let mut cols = Vec::new();
            align_segment(&r, &l, 0, r.len(), 0, l.len(), &mut cols);
            let mut map = vec![None; l.len()];
            for (a, b) in cols { if let (Some(a), Some(b)) = (a, b) { map[b] = Some(a); } }
            let best = all_monotone(r.len(), l.len()).iter()
                .map(|m| alignment_cost(&raw, &lemma, m))
                .fold(f64::INFINITY, f64::min);
            prop_assert!((alignment_cost(&raw, &lemma, &map) - best).abs() < 1e-9);
        }
    }
}
