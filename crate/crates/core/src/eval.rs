//! Correlation of system scores with gold human ratings.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Terms dropped from GEMS by convention.
pub const GEMS_EXCLUSIONS: [&str; 4] = ["assay", "extracellular", "mediaeval", "sulphate"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldRatings {
    pub dataset_id: String,
    pub ratings: BTreeMap<String, f64>,
    /// Terms removed by the exclusion list.
    pub exclusions_applied: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub dataset_id: String,
    pub spearman: f64,
    pub pearson: f64,
    pub n: usize,
}

pub fn average_annotations(raw: &BTreeMap<String, Vec<f64>>) -> Result<BTreeMap<String, f64>> {
    raw.iter()
        .map(|(term, values)| {
            if values.is_empty() {
                return Err(Error::EmptyAnnotations(term.clone()));
            }
            Ok((term.clone(), values.iter().sum::<f64>() / values.len() as f64))
        })
        .collect()
}

pub fn apply_exclusions(
    dataset_id: &str,
    mut ratings: BTreeMap<String, f64>,
    exclusions: &BTreeSet<String>,
) -> GoldRatings {
    let exclusions_applied = exclusions
        .iter()
        .filter(|t| ratings.remove(t.as_str()).is_some())
        .cloned()
        .collect();
    GoldRatings {
        dataset_id: dataset_id.to_owned(),
        ratings,
        exclusions_applied,
    }
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(Error::TooFewValues {
            needed: 3,
            got: x.len(),
        });
    }
    Ok(())
}

/// Ranks starting at 1; tied values share the mean of their positions.
pub fn midranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ConstantInput);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&midranks(x), &midranks(y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub unweighted: f64,
    pub weighted: Option<f64>,
}

/// Mean Spearman across datasets, and the mean weighted by `weights`
/// (typically term counts) when given.
pub fn aggregate(results: &[EvalResult], weights: Option<&BTreeMap<String, f64>>) -> Result<Aggregate> {
    if results.is_empty() {
        return Err(Error::TooFewValues { needed: 1, got: 0 });
    }
    let unweighted = results.iter().map(|r| r.spearman).sum::<f64>() / results.len() as f64;
    let weighted = match weights {
        None => None,
        Some(w) => {
            let mut num = 0.0;
            let mut den = 0.0;
            for r in results {
                let wi = *w
                    .get(&r.dataset_id)
                    .ok_or_else(|| Error::MissingWeight(r.dataset_id.clone()))?;
                num += wi * r.spearman;
                den += wi;
            }
            Some(num / den)
        }
    };
    Ok(Aggregate { unweighted, weighted })
}

/// Terms on only one side of a gold/system join.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinReport {
    pub missing_scores: Vec<String>,
    pub unrated: Vec<String>,
}

fn normalize(term: &str, lowercase: bool) -> String {
    if lowercase {
        term.to_lowercase()
    } else {
        term.to_owned()
    }
}

/// Correlate scores with gold on the terms both sides share.
pub fn evaluate(
    gold: &GoldRatings,
    scores: &BTreeMap<String, f64>,
    lowercase: bool,
) -> Result<(EvalResult, JoinReport)> {
    let scores: BTreeMap<String, f64> = scores.iter().map(|(t, s)| (normalize(t, lowercase), *s)).collect();
    let gold_terms: BTreeMap<String, f64> = gold
        .ratings
        .iter()
        .map(|(t, r)| (normalize(t, lowercase), *r))
        .collect();
    let mut join = JoinReport::default();
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (term, rating) in &gold_terms {
        match scores.get(term) {
            Some(s) => {
                x.push(*s);
                y.push(*rating);
            }
            None => join.missing_scores.push(term.clone()),
        }
    }
    join.unrated = scores
        .keys()
        .filter(|t| !gold_terms.contains_key(*t))
        .cloned()
        .collect();
    if !join.missing_scores.is_empty() {
        log::warn!(
            "{}: {} rated terms have no system score: {}",
            gold.dataset_id,
            join.missing_scores.len(),
            join.missing_scores.join(", ")
        );
    }
    let result = EvalResult {
        dataset_id: gold.dataset_id.clone(),
        spearman: spearman(&x, &y)?,
        pearson: pearson(&x, &y)?,
        n: x.len(),
    };
    Ok((result, join))
}

/// Gold file rows: `term<TAB>rating` or `term<TAB>r1,r2,...`, averaged.
pub fn read_gold(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut raw: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (term, values) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, n + 1, "expected term<TAB>rating"))?;
        let values = values
            .split(',')
            .filter(|v| !v.trim().is_empty())
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(path, n + 1, e.to_string()))?;
        if raw.insert(term.trim().to_owned(), values).is_some() {
            return Err(Error::parse(path, n + 1, format!("duplicate term {term}")));
        }
    }
    average_annotations(&raw)
}

/// One term per line; lines starting with `#` are comments.
pub fn read_term_list(path: &Path) -> Result<BTreeSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    #[serde(flatten)]
    pub result: EvalResult,
    pub exclusions_applied: Vec<String>,
    #[serde(flatten)]
    pub join: JoinReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub datasets: Vec<DatasetReport>,
    pub aggregate: Aggregate,
}
