//! Acceptance gate: one line per criterion, non-zero exit if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::time::{Duration, Instant};

use driftscope::align::{align_document, is_punctuation};
use driftscope::change::{self, count_replacements, frequency_window, jsd_maps, scaled_score, DistributionTable};
use driftscope::corpus::{FrequencyTable, Occurrence};
use driftscope::eval::{aggregate, spearman, EvalResult};
use driftscope::pipeline::{artifacts, Pipeline, RunConfig, RunOptions};
use driftscope::senses::{louvain_partition, SubstituteGraph};
use driftscope::stopwords::StopwordSet;
use driftscope::substitute::{
    request_substitutes, synthetic_substituter, MaskedContext, SubstituteSet, SubstituterConfig, SyntheticSpec,
    TermDistribution,
};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit: Duration) -> String {
    format!("{:.1}s (limit {}s)", elapsed.as_secs_f64(), limit.as_secs())
}

// ---------------------------------------------------------------------------

fn random_sparse(rng: &mut ChaCha8Rng, vocab: &[String]) -> BTreeMap<String, f64> {
    let n = rng.gen_range(1..=50);
    let words: Vec<&String> = vocab.choose_multiple(rng, n).collect();
    let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.001..1.0)).collect();
    let total: f64 = weights.iter().sum();
    words
        .into_iter()
        .zip(weights)
        .map(|(w, x)| (w.clone(), x / total))
        .collect()
}

/// Dense-vector Jensen-Shannon divergence with natural logs, converted.
fn dense_jsd(p: &BTreeMap<String, f64>, q: &BTreeMap<String, f64>, vocab: &[String]) -> f64 {
    let pv: Vec<f64> = vocab.iter().map(|w| p.get(w).copied().unwrap_or(0.0)).collect();
    let qv: Vec<f64> = vocab.iter().map(|w| q.get(w).copied().unwrap_or(0.0)).collect();
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (x / y).ln())
            .sum()
    };
    let m: Vec<f64> = pv.iter().zip(&qv).map(|(a, b)| (a + b) / 2.0).collect();
    (0.5 * kl(&pv, &m) + 0.5 * kl(&qv, &m)) / std::f64::consts::LN_2
}

fn jsd_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let vocab: Vec<String> = (0..80).map(|i| format!("v{i:02}")).collect();
    let mut worst = 0.0f64;
    let mut out_of_bounds = 0;
    for i in 0..10_000 {
        let p = random_sparse(&mut rng, &vocab);
        let q = match i % 10 {
            0 => p.clone(),
            _ => random_sparse(&mut rng, &vocab),
        };
        let got = jsd_maps(&p, &q);
        if !(0.0..=1.0).contains(&got) {
            out_of_bounds += 1;
        }
        worst = worst.max((got - dense_jsd(&p, &q, &vocab)).abs());
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-12 && out_of_bounds == 0 && elapsed < Duration::from_secs(10),
        format!(
            "10000 pairs, max |diff| {worst:.2e}, {out_of_bounds} out of [0,1], {}",
            within(elapsed, Duration::from_secs(10))
        ),
    )
}

fn recount() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let vocab: Vec<String> = (0..30).map(|i| format!("s{i}")).collect();
    let mut mismatches = 0;
    for case in 0..100 {
        let k = rng.gen_range(1..=6);
        let sets: Vec<SubstituteSet> = (0..rng.gen_range(1..200))
            .map(|pos| {
                let m = rng.gen_range(0..=k + 1);
                SubstituteSet {
                    occurrence: Occurrence::new("C1", format!("d{case}"), pos),
                    term: "t".into(),
                    substitutes: vocab.choose_multiple(&mut rng, m).cloned().collect(),
                }
            })
            .collect();
        let d = count_replacements("t", "C1", &sets, k).unwrap();
        let mut naive: BTreeMap<String, u64> = BTreeMap::new();
        for v in &vocab {
            let c = sets
                .iter()
                .filter(|s| s.substitutes.iter().take(k).any(|x| x == v))
                .count() as u64;
            if c > 0 {
                naive.insert(v.clone(), c);
            }
        }
        let total: u64 = naive.values().sum();
        let probs: BTreeMap<String, f64> = naive
            .iter()
            .map(|(v, c)| (v.clone(), *c as f64 / total as f64))
            .collect();
        if d.counts != naive || d.probs != probs || d.support_count != total {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("100 collections, {mismatches} mismatches"))
}

fn window_and_quantile() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // factor as an exact ratio num/den
    let factors = [(2u64, 1u64), (3, 1), (3, 2), (4, 1)];
    let mut failures = 0;
    let mut lower_hits = 0;
    let mut upper_hits = 0;
    for _ in 0..1000 {
        let (num, den) = factors[rng.gen_range(0..factors.len())];
        let f = num as f64 / den as f64;
        let ft = num * den * rng.gen_range(1..60);
        let mut freq = FrequencyTable::new(vec!["C1".into(), "C2".into()]);
        freq.insert("t", vec![ft, 0]);
        let mut candidates = Vec::new();
        let mut raws = BTreeMap::new();
        for i in 0..rng.gen_range(1..40) {
            let fs = match rng.gen_range(0..6) {
                0 => ft * den / num,
                1 => ft * num / den,
                _ => rng.gen_range(1..ft * 6),
            };
            let name = format!("s{i}");
            freq.insert(name.clone(), vec![fs / 2, fs - fs / 2]);
            raws.insert(name.clone(), rng.gen_range(0..8) as f64 / 8.0);
            candidates.push(name);
        }
        candidates.push("t".into());
        let window = frequency_window(&freq, "t", candidates.iter().map(String::as_str), f).unwrap();
        let expected: BTreeSet<String> = candidates
            .iter()
            .filter(|s| *s != "t")
            .filter(|s| {
                let fs = freq.union_count(s);
                ft * den <= fs * num && fs * den <= ft * num
            })
            .cloned()
            .collect();
        lower_hits += expected
            .iter()
            .filter(|s| freq.union_count(s) * num == ft * den)
            .count();
        upper_hits += expected
            .iter()
            .filter(|s| freq.union_count(s) * den == ft * num)
            .count();
        if window != expected {
            failures += 1;
            continue;
        }
        if expected.is_empty() {
            continue;
        }
        let raw_t = rng.gen_range(0..8) as f64 / 8.0;
        let at_most = expected.iter().filter(|s| raws[*s] <= raw_t).count();
        let want = at_most as f64 / expected.len() as f64;
        if scaled_score(raw_t, &raws, &window).unwrap() != want {
            failures += 1;
        }
    }
    outcome(
        failures == 0 && lower_hits > 0 && upper_hits > 0,
        format!("1000 cases, {failures} mismatches, boundary members hit: {lower_hits} lower, {upper_hits} upper"),
    )
}

/// Substitute sets for `n` mentions per corpus of a term whose substitute
/// distribution is the same in both periods.
fn zero_change_dists(term: &str, n: usize, spec: &SyntheticSpec, seed: u64) -> Vec<change::ReplacementDistribution> {
    let mut backend = synthetic_substituter(spec, seed).unwrap().with_candidates_per_k(1);
    let config = SubstituterConfig {
        keep_extra_for_senses: false,
        ..SubstituterConfig::default()
    };
    let stop = StopwordSet::default();
    ["C1", "C2"]
        .iter()
        .map(|c| {
            let contexts: Vec<MaskedContext> = (0..n)
                .map(|pos| MaskedContext {
                    occurrence: Occurrence::new(*c, term, pos),
                    term: "shared".into(),
                    left: vec![],
                    right: vec![],
                    masked_surface: "shared".into(),
                })
                .collect();
            let sets: Vec<SubstituteSet> = request_substitutes(&contexts, &mut backend, &config, &stop)
                .unwrap()
                .into_iter()
                .map(Result::unwrap)
                .collect();
            let mut d = count_replacements("shared", c, &sets, 5).unwrap();
            d.term = term.to_owned();
            d
        })
        .collect()
}

fn ks_uniform(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
        .fold(0.0, f64::max)
}

fn frequency_confound() -> Outcome {
    let start = Instant::now();
    let words: Vec<String> = (0..200).map(|i| format!("w{i:03}")).collect();
    let mut spec = SyntheticSpec::new();
    let shared = TermDistribution::Categorical(common::zipf(&words));
    spec.entry("shared".into())
        .or_default()
        .extend([("C1".into(), shared.clone()), ("C2".into(), shared)]);

    // every term unchanged; half the population at 100 mentions per corpus,
    // half at 2000, mirroring the two groups of the raw-score comparison
    let names: Vec<(String, usize)> = (0..2200)
        .map(|i| (format!("term{i:04}"), if i % 2 == 0 { 100 } else { 2000 }))
        .collect();
    let dists: DistributionTable = names
        .par_iter()
        .map(|(name, n)| (name.clone(), zero_change_dists(name, *n, &spec, 11)))
        .collect();
    let raw = |name: &str| jsd_maps(&dists[name][0].probs, &dists[name][1].probs);
    let median = |n: usize| {
        let mut v: Vec<f64> = names.iter().filter(|t| t.1 == n).take(200).map(|t| raw(&t.0)).collect();
        v.sort_by(f64::total_cmp);
        (v[99] + v[100]) / 2.0
    };
    let (low, high) = (median(100), median(2000));

    let mut freq = FrequencyTable::new(vec!["C1".into(), "C2".into()]);
    for (name, n) in &names {
        freq.insert(name.clone(), vec![*n as u64, *n as u64]);
    }
    let targets: BTreeSet<String> = names[..200].iter().map(|(n, _)| n.clone()).collect();
    let background: BTreeSet<String> = names[200..].iter().map(|(n, _)| n.clone()).collect();
    let scores = change::score_all(&targets, &background, &dists, &freq, 2.0, 50).unwrap();
    let scaled: Vec<f64> = scores.iter().filter_map(|s| s.scaled).collect();
    let ks = ks_uniform(&scaled);
    let elapsed = start.elapsed();
    let limit = Duration::from_secs(120);
    outcome(
        low > high && scaled.len() == 200 && ks <= 0.15 && elapsed < limit,
        format!(
            "median raw JSD {low:.4} (100 samples) vs {high:.4} (2000 samples); KS {ks:.3} over {} targets; {}",
            scaled.len(),
            within(elapsed, limit)
        ),
    )
}

fn planted_change() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (targets, background) = common::graded_terms(30, 1.0 / 30.0, 500, 21);
    let config_path = common::planted_fixture(dir.path(), &targets, &background, 21);
    let config = RunConfig::load(&config_path).unwrap();
    let scores = Pipeline::open(config, RunOptions::default()).unwrap().score().unwrap();
    let magnitude: BTreeMap<&str, f64> = targets.iter().map(|t| (t.name.as_str(), t.magnitude)).collect();
    let (x, y): (Vec<f64>, Vec<f64>) = scores
        .iter()
        .filter_map(|s| s.scaled.map(|v| (v, magnitude[s.term.as_str()])))
        .unzip();
    let rho = spearman(&x, &y).unwrap_or(f64::NAN);
    let elapsed = start.elapsed();
    let limit = Duration::from_secs(300);
    outcome(
        rho >= 0.8 && x.len() == 30 && elapsed < limit,
        format!(
            "Spearman(scaled, planted) {rho:.3} over {} targets; {}",
            x.len(),
            within(elapsed, limit)
        ),
    )
}

fn alignment_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let bases: Vec<String> = (0..300)
        .map(|_| {
            let len = rng.gen_range(3..9);
            (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
        })
        .collect();
    let suffixes = ["", "", "s", "ed", "ing"];
    let mut monotone_violations = 0;

    let mut identity_ok = 0;
    for d in 0..100 {
        let n = rng.gen_range(1..80);
        let toks: Vec<String> = (0..n).map(|_| bases[rng.gen_range(0..40)].clone()).collect();
        let map = align_document(&format!("id{d}"), &toks, &toks, is_punctuation);
        monotone_violations += usize::from(!map.is_monotone());
        if map.lemma_to_raw.iter().enumerate().all(|(j, r)| *r == Some(j)) {
            identity_ok += 1;
        }
    }

    let mut worst = 1.0f64;
    let (mut matched, mut total) = (0usize, 0usize);
    for d in 0..300 {
        let n = rng.gen_range(20..60);
        let base: Vec<&String> = (0..n).map(|_| &bases[rng.gen_range(0..bases.len())]).collect();
        let raw: Vec<String> = base
            .iter()
            .map(|b| format!("{b}{}", suffixes[rng.gen_range(0..suffixes.len())]))
            .collect();
        // lemma side: the bases, then up to three token insertions or deletions
        let mut lemma: Vec<String> = base.iter().map(|b| b.to_string()).collect();
        let mut truth: Vec<Option<usize>> = (0..n).map(Some).collect();
        for _ in 0..rng.gen_range(0..=3) {
            let at = rng.gen_range(0..lemma.len());
            if rng.gen_bool(0.5) {
                lemma.remove(at);
                truth.remove(at);
            } else {
                lemma.insert(at, bases[rng.gen_range(0..bases.len())].clone());
                truth.insert(at, None);
            }
        }
        let map = align_document(&format!("p{d}"), &raw, &lemma, is_punctuation);
        monotone_violations += usize::from(!map.is_monotone());
        let ok = map.lemma_to_raw.iter().zip(&truth).filter(|(a, b)| a == b).count();
        worst = worst.min(ok as f64 / truth.len() as f64);
        matched += ok;
        total += truth.len();
    }
    outcome(
        identity_ok == 100 && worst >= 0.9 && monotone_violations == 0,
        format!(
            "identity {identity_ok}/100 fully aligned; planted fixtures worst {:.1}% / overall {:.1}% match; {monotone_violations} non-monotone maps",
            100.0 * worst,
            100.0 * matched as f64 / total as f64
        ),
    )
}

fn graph(n: usize, edges: &[(usize, usize, u64)]) -> SubstituteGraph {
    SubstituteGraph {
        term: "t".into(),
        nodes: (0..n).map(|i| format!("n{i}")).collect(),
        edges: edges.iter().map(|&(i, j, w)| ((i.min(j), i.max(j)), w)).collect(),
    }
}

/// Modularity from the edge list: sum over intra-community edges of
/// w/m minus the sum over communities of (degree sum / 2m)^2.
fn modularity_oracle(n: usize, edges: &[(usize, usize, u64)], labels: &[usize]) -> f64 {
    let m: f64 = edges.iter().map(|e| e.2 as f64).sum();
    let mut deg = vec![0.0; n];
    for &(i, j, w) in edges {
        deg[i] += w as f64;
        deg[j] += w as f64;
    }
    let inside: f64 = edges
        .iter()
        .filter(|e| labels[e.0] == labels[e.1])
        .map(|e| e.2 as f64)
        .sum();
    let groups: BTreeSet<usize> = labels.iter().copied().collect();
    let expected: f64 = groups
        .iter()
        .map(|g| {
            let d: f64 = (0..n).filter(|i| labels[*i] == *g).map(|i| deg[i]).sum();
            (d / (2.0 * m)).powi(2)
        })
        .sum();
    inside / m - expected
}

/// Every set partition of `0..n` as restricted growth strings.
fn all_partitions(n: usize) -> Vec<Vec<usize>> {
    fn grow(prefix: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        let next = prefix.iter().max().map_or(0, |m| m + 1);
        for label in 0..=next {
            prefix.push(label);
            grow(prefix, n, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    grow(&mut Vec::new(), n, &mut out);
    out
}

fn louvain() -> Outcome {
    let edges = [
        (0, 1, 3),
        (1, 2, 3),
        (0, 2, 3),
        (3, 4, 3),
        (4, 5, 3),
        (3, 5, 3),
        (2, 3, 1),
    ];
    let partitions = all_partitions(6);
    let best = partitions
        .iter()
        .max_by(|a, b| modularity_oracle(6, &edges, a).total_cmp(&modularity_oracle(6, &edges, b)))
        .unwrap();
    let expected: Vec<Vec<String>> = (0..=*best.iter().max().unwrap())
        .map(|g| (0..6).filter(|i| best[*i] == g).map(|i| format!("n{i}")).collect())
        .collect();
    let g = graph(6, &edges);
    let recovered = (0..10).all(|seed| {
        let mut got = louvain_partition(&g, 1.0, seed).unwrap().clusters;
        got.sort();
        got == expected
    });

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut non_monotone = 0;
    for _ in 0..100 {
        let n = rng.gen_range(2..60);
        let mut edges = BTreeMap::new();
        for _ in 0..rng.gen_range(0..4 * n) {
            let (i, j) = (rng.gen_range(0..n), rng.gen_range(0..n));
            if i != j {
                *edges.entry((i.min(j), i.max(j))).or_insert(0u64) += rng.gen_range(1..6);
            }
        }
        let edges: Vec<(usize, usize, u64)> = edges.into_iter().map(|((i, j), w)| (i, j, w)).collect();
        let p = louvain_partition(&graph(n, &edges), 1.0, rng.gen()).unwrap();
        if p.history.windows(2).any(|w| w[1] < w[0]) {
            non_monotone += 1;
        }
    }
    outcome(
        recovered && partitions.len() == 203 && non_monotone == 0,
        format!(
            "two triangles {} (oracle over {} partitions); {non_monotone}/100 random graphs with decreasing modularity",
            if recovered { "recovered" } else { "not recovered" },
            partitions.len()
        ),
    )
}

fn table_arithmetic() -> Outcome {
    let rows = [
        ("a", 0.535, 96.0),
        ("b", 0.547, 37.0),
        ("c", 0.563, 40.0),
        ("d", 0.533, 48.0),
        ("e", 0.310, 31.0),
    ];
    let results: Vec<EvalResult> = rows
        .iter()
        .map(|(id, s, _)| EvalResult {
            dataset_id: id.to_string(),
            spearman: *s,
            pearson: *s,
            n: 0,
        })
        .collect();
    let weights: BTreeMap<String, f64> = rows.iter().map(|(id, _, w)| (id.to_string(), *w)).collect();
    let agg = aggregate(&results, Some(&weights)).unwrap();
    let weighted = agg.weighted.unwrap();
    outcome(
        (agg.unweighted - 0.498).abs() <= 0.001 && (weighted - 0.514).abs() <= 0.001,
        format!(
            "unweighted {:.4} (expected 0.498), weighted {weighted:.4} (expected 0.514)",
            agg.unweighted
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (targets, background) = common::graded_terms(10, 0.03, 120, 31);
    let config_path = common::planted_fixture(dir.path(), &targets, &background, 31);
    let run = || {
        let config = RunConfig::load(&config_path).unwrap();
        let out = config.output_dir.clone();
        let _ = fs::remove_dir_all(&out);
        let mut p = Pipeline::open(config, RunOptions::default()).unwrap();
        p.score().unwrap();
        fs::read(p.path(artifacts::SCORES)).unwrap()
    };
    let (a, b) = (run(), run());
    outcome(
        a == b && !a.is_empty(),
        format!("two clean runs, {} bytes, identical: {}", a.len(), a == b),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("JSD oracle equivalence", jsd_oracle),
        ("replacement recount", recount),
        ("frequency window and quantile enumeration", window_and_quantile),
        ("frequency confound and calibration", frequency_confound),
        ("planted change end to end", planted_change),
        ("alignment suite", alignment_suite),
        ("Louvain", louvain),
        ("aggregate arithmetic", table_arithmetic),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        println!(
            "{} {name}: {}",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail
        );
        failed += usize::from(!result.pass);
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
