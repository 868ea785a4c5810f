//! Replacement distributions and change scores.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::FrequencyTable;
use crate::error::{Error, Result};
use crate::substitute::SubstituteSet;

/// Normalized counts of how often each word appears among a term's top-k
/// substitutes in one corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplacementDistribution {
    pub term: String,
    pub corpus_id: String,
    pub counts: BTreeMap<String, u64>,
    pub probs: BTreeMap<String, f64>,
    pub support_count: u64,
}

impl ReplacementDistribution {
    pub fn empty(term: &str, corpus_id: &str) -> Self {
        Self {
            term: term.to_owned(),
            corpus_id: corpus_id.to_owned(),
            counts: BTreeMap::new(),
            probs: BTreeMap::new(),
            support_count: 0,
        }
    }

    pub fn from_counts(term: &str, corpus_id: &str, counts: BTreeMap<String, u64>) -> Self {
        let support_count: u64 = counts.values().sum();
        let probs = counts
            .iter()
            .filter(|(_, c)| **c > 0)
            .map(|(w, c)| (w.clone(), *c as f64 / support_count as f64))
            .collect();
        Self {
            term: term.to_owned(),
            corpus_id: corpus_id.to_owned(),
            counts: counts.into_iter().filter(|(_, c)| *c > 0).collect(),
            probs,
            support_count,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.support_count == 0
    }
}

/// Count each word once per substitute set in which it appears among the
/// first `k`. An empty input yields an empty distribution.
pub fn count_replacements<'a, I>(term: &str, corpus_id: &str, sets: I, k: usize) -> Result<ReplacementDistribution>
where
    I: IntoIterator<Item = &'a SubstituteSet>,
{
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for set in sets {
        if set.term != term || set.occurrence.corpus_id != corpus_id {
            return Err(Error::InvalidArgument(format!(
                "substitute set for {}/{} counted as {term}/{corpus_id}",
                set.term, set.occurrence.corpus_id
            )));
        }
        let top = set.top(k);
        for (i, w) in top.iter().enumerate() {
            if !top[..i].contains(w) {
                *counts.entry(w.clone()).or_insert(0) += 1;
            }
        }
    }
    Ok(ReplacementDistribution::from_counts(term, corpus_id, counts))
}

fn half_kl_term(p: f64, m: f64) -> f64 {
    if p > 0.0 {
        p * (p / m).log2()
    } else {
        0.0
    }
}

/// Base-2 Jensen-Shannon divergence of two sparse probability maps.
///
/// Each key contributes `f(p, q) + f(q, p)`, so swapping the arguments
/// performs the same floating point operations and the result is exactly
/// symmetric.
pub fn jsd_maps(p: &BTreeMap<String, f64>, q: &BTreeMap<String, f64>) -> f64 {
    let mut total = 0.0;
    let mut add = |a: f64, b: f64| {
        let m = 0.5 * (a + b);
        total += 0.5 * (half_kl_term(a, m) + half_kl_term(b, m));
    };
    let mut pi = p.iter().peekable();
    let mut qi = q.iter().peekable();
    loop {
        match (pi.peek(), qi.peek()) {
            (Some((kp, vp)), Some((kq, vq))) => match kp.cmp(kq) {
                Ordering::Less => {
                    add(**vp, 0.0);
                    pi.next();
                }
                Ordering::Greater => {
                    add(0.0, **vq);
                    qi.next();
                }
                Ordering::Equal => {
                    add(**vp, **vq);
                    pi.next();
                    qi.next();
                }
            },
            (Some((_, vp)), None) => {
                add(**vp, 0.0);
                pi.next();
            }
            (None, Some((_, vq))) => {
                add(0.0, **vq);
                qi.next();
            }
            (None, None) => break,
        }
    }
    total.clamp(0.0, 1.0)
}

pub fn jsd(p: &ReplacementDistribution, q: &ReplacementDistribution) -> Result<f64> {
    for d in [p, q] {
        if d.is_empty() {
            return Err(Error::EmptyDistribution {
                term: d.term.clone(),
                corpus_id: d.corpus_id.clone(),
            });
        }
    }
    Ok(jsd_maps(&p.probs, &q.probs))
}

/// Candidates whose union frequency lies within a factor `f` of the
/// term's, bounds inclusive. The term itself is never included.
pub fn frequency_window<'a, I>(freq: &FrequencyTable, term: &str, candidates: I, f: f64) -> Result<BTreeSet<String>>
where
    I: IntoIterator<Item = &'a str>,
{
    if !freq.contains(term) {
        return Err(Error::UnknownTerm(term.to_owned()));
    }
    if f.is_nan() || f <= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "frequency factor must exceed 1, got {f}"
        )));
    }
    let ft = freq.union_count(term) as f64;
    Ok(candidates
        .into_iter()
        .filter(|s| *s != term && freq.contains(s))
        .filter(|s| {
            let fs = freq.union_count(s) as f64;
            ft / f <= fs && fs <= ft * f
        })
        .map(str::to_owned)
        .collect())
}

/// Share of the window whose raw score does not exceed `raw_t`.
pub fn scaled_score(raw_t: f64, raw_background: &BTreeMap<String, f64>, window: &BTreeSet<String>) -> Result<f64> {
    if window.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let mut at_most = 0usize;
    for s in window {
        let raw_s = raw_background
            .get(s)
            .ok_or_else(|| Error::InvalidArgument(format!("window term {s} has no raw score")))?;
        if raw_t >= *raw_s {
            at_most += 1;
        }
    }
    Ok(at_most as f64 / window.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeScore {
    pub term: String,
    /// Union count across both corpora.
    pub frequency: u64,
    /// `None` when either corpus has no substitutes for the term.
    pub raw: Option<f64>,
    /// `None` when raw is undefined or no background term is comparable.
    pub scaled: Option<f64>,
    pub window_size: usize,
    pub widen_steps: u32,
}

/// Per-term distributions, one per corpus in table order.
pub type DistributionTable = BTreeMap<String, Vec<ReplacementDistribution>>;

/// Group substitute sets by term and corpus and count each group. Every
/// term in `terms` gets a slot, empty where no sets exist.
pub fn distributions_from_sets<'a, T>(
    sets: &[SubstituteSet],
    corpus_ids: &[String],
    terms: T,
    k: usize,
) -> Result<DistributionTable>
where
    T: IntoIterator<Item = &'a str>,
{
    let mut groups: BTreeMap<(&str, &str), Vec<&SubstituteSet>> = BTreeMap::new();
    for s in sets {
        groups
            .entry((s.term.as_str(), s.occurrence.corpus_id.as_str()))
            .or_default()
            .push(s);
    }
    let terms: Vec<&str> = terms.into_iter().collect();
    terms
        .par_iter()
        .map(|term| {
            let dists = corpus_ids
                .iter()
                .map(|c| match groups.get(&(*term, c.as_str())) {
                    Some(g) => count_replacements(term, c, g.iter().copied(), k),
                    None => Ok(ReplacementDistribution::empty(term, c)),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(((*term).to_owned(), dists))
        })
        .collect()
}

fn raw_score(dists: Option<&Vec<ReplacementDistribution>>) -> Option<f64> {
    match dists.map(Vec::as_slice) {
        Some([p, q]) if !p.is_empty() && !q.is_empty() => Some(jsd_maps(&p.probs, &q.probs)),
        _ => None,
    }
}

fn desc(a: Option<f64>, b: Option<f64>) -> Ordering {
    match (a, b) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    }
}

/// Widening stops after this many doublings even if the window is thin.
const MAX_WIDEN_STEPS: u32 = 64;

/// Raw and scaled scores for every target, sorted by scaled then raw
/// (both descending, undefined last), then term.
///
/// Windows are drawn from background terms only. A window smaller than
/// `min_window` is widened by doubling `f` until it is large enough or
/// already holds every comparable background term.
pub fn score_all(
    targets: &BTreeSet<String>,
    background: &BTreeSet<String>,
    distributions: &DistributionTable,
    freq: &FrequencyTable,
    f: f64,
    min_window: usize,
) -> Result<Vec<ChangeScore>> {
    if freq.corpus_ids.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "change scoring compares exactly two corpora, got {}",
            freq.corpus_ids.len()
        )));
    }
    if f.is_nan() || f <= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "frequency factor must exceed 1, got {f}"
        )));
    }
    let raw_background: BTreeMap<String, f64> = background
        .par_iter()
        .filter_map(|s| raw_score(distributions.get(s)).map(|r| (s.clone(), r)))
        .collect();
    let skipped = background.len() - raw_background.len();
    if skipped > 0 {
        log::warn!("{skipped} background terms lack substitutes in a corpus and are not comparable");
    }
    let comparable: Vec<&str> = raw_background
        .keys()
        .map(String::as_str)
        .filter(|s| freq.union_count(s) > 0)
        .collect();

    let mut scores: Vec<ChangeScore> = targets
        .par_iter()
        .map(|t| -> Result<ChangeScore> {
            let frequency = freq.union_count(t);
            let raw = raw_score(distributions.get(t));
            let mut score = ChangeScore {
                term: t.clone(),
                frequency,
                raw,
                scaled: None,
                window_size: 0,
                widen_steps: 0,
            };
            let Some(raw_t) = raw else {
                return Ok(score);
            };
            if frequency == 0 {
                return Ok(score);
            }
            let available = comparable.iter().filter(|s| **s != t.as_str()).count();
            let mut factor = f;
            let mut window = frequency_window(freq, t, comparable.iter().copied(), factor)?;
            while window.len() < min_window && window.len() < available && score.widen_steps < MAX_WIDEN_STEPS {
                factor *= 2.0;
                score.widen_steps += 1;
                window = frequency_window(freq, t, comparable.iter().copied(), factor)?;
            }
            score.window_size = window.len();
            if !window.is_empty() {
                score.scaled = Some(scaled_score(raw_t, &raw_background, &window)?);
            }
            Ok(score)
        })
        .collect::<Result<_>>()?;

    scores.sort_by(|a, b| {
        desc(a.scaled, b.scaled)
            .then_with(|| desc(a.raw, b.raw))
            .then_with(|| a.term.cmp(&b.term))
    });
    Ok(scores)
}

/// Raw scores of background terms, for plot data.
pub fn background_raw_scores(
    background: &BTreeSet<String>,
    distributions: &DistributionTable,
) -> BTreeMap<String, f64> {
    background
        .iter()
        .filter_map(|s| raw_score(distributions.get(s)).map(|r| (s.clone(), r)))
        .collect()
}

pub const UNDEFINED: &str = "UNDEFINED";
const REPORT_COLUMNS: &str = "term\tfrequency\traw_jsd\tscaled\twindow_size\twiden_steps";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_owned(), |x| x.to_string())
}

/// Write the score report. `echo` becomes a leading `#` comment line.
pub fn write_score_report<W: Write>(mut out: W, scores: &[ChangeScore], echo: Option<&str>) -> std::io::Result<()> {
    if let Some(echo) = echo {
        writeln!(out, "#{echo}")?;
    }
    writeln!(out, "{REPORT_COLUMNS}")?;
    for s in scores {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            s.term,
            s.frequency,
            fmt_opt(s.raw),
            fmt_opt(s.scaled),
            s.window_size,
            s.widen_steps
        )?;
    }
    Ok(())
}

pub fn read_score_report(path: &Path) -> Result<Vec<ChangeScore>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut scores = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.starts_with('#') || line == REPORT_COLUMNS || line.is_empty() {
            continue;
        }
        let bad = |m: &str| Error::parse(path, n + 1, m);
        let cols: Vec<&str> = line.split('\t').collect();
        let [term, frequency, raw, scaled, window_size, widen_steps] = cols[..] else {
            return Err(bad("expected 6 columns"));
        };
        let opt = |s: &str| -> Result<Option<f64>> {
            if s == UNDEFINED {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad("bad score"))
            }
        };
        scores.push(ChangeScore {
            term: term.to_owned(),
            frequency: frequency.parse().map_err(|_| bad("bad frequency"))?,
            raw: opt(raw)?,
            scaled: opt(scaled)?,
            window_size: window_size.parse().map_err(|_| bad("bad window size"))?,
            widen_steps: widen_steps.parse().map_err(|_| bad("bad widen steps"))?,
        });
    }
    Ok(scores)
}
