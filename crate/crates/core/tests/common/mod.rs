#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use driftscope::substitute::{TermDistribution, WeightedSense};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

/// Zipf weights over `words`, normalized.
pub fn zipf(words: &[String]) -> BTreeMap<String, f64> {
    let total: f64 = (1..=words.len()).map(|r| 1.0 / r as f64).sum();
    words
        .iter()
        .enumerate()
        .map(|(r, w)| (w.clone(), 1.0 / (r + 1) as f64 / total))
        .collect()
}

pub struct PlantedTerm {
    pub name: String,
    /// Share of period-2 mentions drawn from a novel sense.
    pub magnitude: f64,
    /// Occurrences per corpus.
    pub frequency: usize,
}

/// Two corpora built from the given terms, a synthetic spec in which each
/// term keeps its period-1 distribution in period 2 except for a novel
/// sense of weight `magnitude`, a target list and a run config.
pub fn planted_fixture(dir: &Path, targets: &[PlantedTerm], background: &[PlantedTerm], seed: u64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shared: Vec<String> = (0..60).map(|i| format!("w{i:03}")).collect();
    let mut spec: BTreeMap<String, BTreeMap<String, TermDistribution>> = BTreeMap::new();
    let mut tokens: Vec<&str> = Vec::new();
    for t in targets.iter().chain(background) {
        let mut words = shared.clone();
        words.shuffle(&mut rng);
        let base = zipf(&words[..40]);
        let novel: Vec<String> = (0..30).map(|i| format!("{}_new{i:02}", t.name)).collect();
        let novel = zipf(&novel);
        let later = if t.magnitude > 0.0 {
            TermDistribution::Mixture {
                senses: vec![
                    WeightedSense {
                        weight: 1.0 - t.magnitude,
                        dist: base.clone(),
                    },
                    WeightedSense {
                        weight: t.magnitude,
                        dist: novel,
                    },
                ],
            }
        } else {
            TermDistribution::Categorical(base.clone())
        };
        let entry = spec.entry(t.name.clone()).or_default();
        entry.insert("C1".into(), TermDistribution::Categorical(base));
        entry.insert("C2".into(), later);
        for _ in 0..t.frequency {
            tokens.push(&t.name);
        }
    }
    for (name, _) in [("c1.txt", 0), ("c2.txt", 1)] {
        let mut toks = tokens.clone();
        toks.shuffle(&mut rng);
        let mut text = String::new();
        for line in toks.chunks(25) {
            text.push_str(&line.join(" "));
            text.push('\n');
        }
        fs::write(dir.join(name), text).unwrap();
    }
    let target_list: Vec<&str> = targets.iter().map(|t| t.name.as_str()).collect();
    fs::write(dir.join("targets.txt"), target_list.join("\n") + "\n").unwrap();
    fs::write(dir.join("spec.json"), serde_json::to_string(&spec).unwrap()).unwrap();
    let config = json!({
        "corpora": [{"id": "C1", "raw": "c1.txt"}, {"id": "C2", "raw": "c2.txt"}],
        "targets": "targets.txt",
        "background_count": background.len(),
        "background_min_count": 20,
        "stopwords": null,
        "seed": seed,
        "backend": {"kind": "synthetic", "spec": "spec.json"},
        "output_dir": "out",
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

/// Frequencies spread log-uniformly over `[lo, hi]`.
pub fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> usize {
    (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp().round() as usize
}

/// `n` targets with magnitudes `step * i` and `n_bg` background terms whose
/// magnitudes are uniform over the same range, all with log-uniform
/// frequencies. A background with no change at all would leave the quantile
/// nothing to rank against: every target above the noise floor scores 1.
pub fn graded_terms(n: usize, step: f64, n_bg: usize, seed: u64) -> (Vec<PlantedTerm>, Vec<PlantedTerm>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let targets = (0..n)
        .map(|i| PlantedTerm {
            name: format!("tgt{i:02}"),
            magnitude: step * i as f64,
            frequency: log_uniform(&mut rng, 60.0, 240.0),
        })
        .collect();
    let background = (0..n_bg)
        .map(|i| PlantedTerm {
            name: format!("bg{i:03}"),
            magnitude: rng.gen::<f64>() * step * n as f64,
            frequency: log_uniform(&mut rng, 40.0, 360.0),
        })
        .collect();
    (targets, background)
}
