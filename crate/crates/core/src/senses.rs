//! Sense clusters from substitute co-occurrence graphs.
//!
//! Substitutes that tend to be predicted together at the same positions
//! end up in the same Louvain community; each mention then joins the
//! community its substitute set overlaps most (by Jaccard similarity).

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::Occurrence;
use crate::error::{Error, Result};
use crate::seed;
use crate::substitute::SubstituteSet;

pub const DEFAULT_RESOLUTION: f64 = 1.0;
/// Minimum modularity improvement for another pass or level.
pub const GAIN_THRESHOLD: f64 = 1e-7;
const MAX_PASSES: usize = 1000;

/// The substitutes of `set` with the target dropped, truncated to `k`.
///
/// Sets are stored with one extra substitute so that removing the target
/// still leaves `k`.
pub fn sense_view(set: &SubstituteSet, k: usize) -> SubstituteSet {
    let target = set.term.to_lowercase();
    SubstituteSet {
        occurrence: set.occurrence.clone(),
        term: set.term.clone(),
        substitutes: set
            .substitutes
            .iter()
            .filter(|s| s.to_lowercase() != target)
            .take(k)
            .cloned()
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstituteGraph {
    pub term: String,
    /// Sorted, distinct.
    pub nodes: Vec<String>,
    /// `(i, j)` with `i < j` indexing `nodes`.
    pub edges: BTreeMap<(usize, usize), u64>,
}

impl SubstituteGraph {
    pub fn node_index(&self, node: &str) -> Option<usize> {
        self.nodes.binary_search_by(|n| n.as_str().cmp(node)).ok()
    }

    /// Edge weight between two substitutes, zero when absent.
    pub fn weight(&self, u: &str, v: &str) -> u64 {
        match (self.node_index(u), self.node_index(v)) {
            (Some(i), Some(j)) if i != j => self.edges.get(&(i.min(j), i.max(j))).copied().unwrap_or(0),
            _ => 0,
        }
    }

    /// Weighted degree of every node.
    pub fn degrees(&self) -> Vec<u64> {
        let mut deg = vec![0; self.nodes.len()];
        for (&(i, j), &w) in &self.edges {
            deg[i] += w;
            deg[j] += w;
        }
        deg
    }
}

/// Nodes are all substitutes; an edge counts the sets holding both ends.
pub fn build_cooccurrence_graph(term: &str, sets: &[SubstituteSet]) -> Result<SubstituteGraph> {
    if sets.is_empty() {
        return Err(Error::InvalidArgument(format!("no substitute sets for {term}")));
    }
    let nodes: Vec<String> = sets
        .iter()
        .flat_map(|s| s.substitutes.iter().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: HashMap<&str, usize> = nodes.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut edges = BTreeMap::new();
    for set in sets {
        let members: BTreeSet<usize> = set.substitutes.iter().map(|s| index[s.as_str()]).collect();
        let members: Vec<usize> = members.into_iter().collect();
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                *edges.entry((i, j)).or_insert(0) += 1;
            }
        }
    }
    Ok(SubstituteGraph {
        term: term.to_owned(),
        nodes,
        edges,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensePartition {
    pub term: String,
    /// Disjoint sorted member lists covering every node.
    pub clusters: Vec<Vec<String>>,
    pub modularity: f64,
    /// Modularity before the first level and after each accepted level.
    pub history: Vec<f64>,
}

/// Symmetric weighted adjacency with explicit self-loops (`A[i][i]`).
struct LevelGraph {
    adj: Vec<Vec<(usize, f64)>>,
    degree: Vec<f64>,
    total: f64,
}

impl LevelGraph {
    fn from_graph(g: &SubstituteGraph) -> Self {
        let n = g.nodes.len();
        let mut adj = vec![Vec::new(); n];
        for (&(i, j), &w) in &g.edges {
            adj[i].push((j, w as f64));
            adj[j].push((i, w as f64));
        }
        Self::finish(adj)
    }

    fn finish(mut adj: Vec<Vec<(usize, f64)>>) -> Self {
        for row in &mut adj {
            row.sort_by_key(|(j, _)| *j);
        }
        let degree: Vec<f64> = adj.iter().map(|row| row.iter().map(|(_, w)| w).sum()).collect();
        let total = degree.iter().sum();
        Self { adj, degree, total }
    }

    fn modularity(&self, comm: &[usize], resolution: f64) -> f64 {
        if self.total == 0.0 {
            return 0.0;
        }
        let k = comm.iter().max().map_or(0, |m| m + 1);
        let mut inner = vec![0.0; k];
        let mut tot = vec![0.0; k];
        for (i, row) in self.adj.iter().enumerate() {
            tot[comm[i]] += self.degree[i];
            for &(j, w) in row {
                if comm[j] == comm[i] {
                    inner[comm[i]] += w;
                }
            }
        }
        (0..k)
            .map(|c| inner[c] / self.total - resolution * (tot[c] / self.total).powi(2))
            .sum()
    }

    /// Greedy local moves in `order`; true if any node moved.
    fn local_moves(&self, comm: &mut [usize], order: &[usize], resolution: f64) -> bool {
        let n = self.adj.len();
        let mut tot = vec![0.0; n];
        for i in 0..n {
            tot[comm[i]] += self.degree[i];
        }
        let mut weight_to = vec![0.0; n];
        let mut touched: Vec<usize> = Vec::new();
        let mut any_move = false;
        let mut current = self.modularity(comm, resolution);
        for _ in 0..MAX_PASSES {
            let mut moved = false;
            for &i in order {
                let d = comm[i];
                let ki = self.degree[i];
                for &(j, w) in &self.adj[i] {
                    if j != i {
                        if weight_to[comm[j]] == 0.0 {
                            touched.push(comm[j]);
                        }
                        weight_to[comm[j]] += w;
                    }
                }
                tot[d] -= ki;
                let gain = |c: usize, w: f64| w - resolution * tot[c] * ki / self.total;
                let mut best = d;
                let mut best_gain = gain(d, weight_to[d]);
                for &c in &touched {
                    let g = gain(c, weight_to[c]);
                    if g > best_gain {
                        best = c;
                        best_gain = g;
                    }
                }
                tot[best] += ki;
                if best != d {
                    comm[i] = best;
                    moved = true;
                }
                for c in touched.drain(..) {
                    weight_to[c] = 0.0;
                }
            }
            any_move |= moved;
            let next = self.modularity(comm, resolution);
            if !moved || next - current <= GAIN_THRESHOLD {
                break;
            }
            current = next;
        }
        any_move
    }

    /// Collapse communities (numbered `0..k`) into single nodes.
    fn aggregate(&self, comm: &[usize], k: usize) -> Self {
        let mut rows: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); k];
        for (i, row) in self.adj.iter().enumerate() {
            for &(j, w) in row {
                *rows[comm[i]].entry(comm[j]).or_insert(0.0) += w;
            }
        }
        Self::finish(rows.into_iter().map(|r| r.into_iter().collect()).collect())
    }
}

/// Renumber labels to `0..k` in order of first appearance.
fn compact(comm: &mut [usize]) -> usize {
    let mut map = HashMap::new();
    for c in comm.iter_mut() {
        let next = map.len();
        *c = *map.entry(*c).or_insert(next);
    }
    map.len()
}

/// Louvain community detection. Each level visits nodes in a seeded random
/// order; a level is kept only if it strictly raises modularity, so the
/// recorded history never decreases.
pub fn louvain_partition(graph: &SubstituteGraph, resolution: f64, seed: u64) -> Result<SensePartition> {
    if graph.nodes.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "empty substitute graph for {}",
            graph.term
        )));
    }
    let mut rng = seed::rng_for(seed, &["louvain", &graph.term]);
    let base = LevelGraph::from_graph(graph);
    let mut membership: Vec<usize> = (0..graph.nodes.len()).collect();
    let mut level = LevelGraph::from_graph(graph);
    let mut history = vec![base.modularity(&membership, resolution)];

    loop {
        let n = level.adj.len();
        let mut comm: Vec<usize> = (0..n).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        if !level.local_moves(&mut comm, &order, resolution) {
            break;
        }
        let k = compact(&mut comm);
        let candidate: Vec<usize> = membership.iter().map(|&m| comm[m]).collect();
        let q = base.modularity(&candidate, resolution);
        let prev = *history.last().expect("history starts non-empty");
        if q <= prev {
            break;
        }
        membership = candidate;
        history.push(q);
        if q - prev <= GAIN_THRESHOLD || k == n {
            break;
        }
        level = level.aggregate(&comm, k);
    }

    let k = membership.iter().max().map_or(0, |m| m + 1);
    let mut clusters: Vec<Vec<String>> = vec![Vec::new(); k];
    for (i, &c) in membership.iter().enumerate() {
        clusters[c].push(graph.nodes[i].clone());
    }
    clusters.retain(|c| !c.is_empty());
    clusters.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a[0].cmp(&b[0])));
    Ok(SensePartition {
        term: graph.term.clone(),
        clusters,
        modularity: *history.last().expect("non-empty"),
        history,
    })
}

/// Modularity of an arbitrary partition given as member lists.
pub fn modularity(graph: &SubstituteGraph, clusters: &[Vec<String>], resolution: f64) -> Result<f64> {
    let mut comm = vec![usize::MAX; graph.nodes.len()];
    for (c, members) in clusters.iter().enumerate() {
        for m in members {
            let i = graph
                .node_index(m)
                .ok_or_else(|| Error::InvalidArgument(format!("{m} is not a graph node")))?;
            comm[i] = c;
        }
    }
    if comm.contains(&usize::MAX) {
        return Err(Error::InvalidArgument("partition does not cover the graph".into()));
    }
    Ok(LevelGraph::from_graph(graph).modularity(&comm, resolution))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MentionAssignment {
    pub occurrence: Occurrence,
    /// `None` when the mention shares no substitute with any cluster.
    pub cluster: Option<usize>,
    pub jaccard: f64,
}

/// Assign each mention to the cluster with the highest Jaccard similarity;
/// ties go to the lower index.
pub fn assign_mentions(sets: &[SubstituteSet], partition: &SensePartition) -> Vec<MentionAssignment> {
    let clusters: Vec<BTreeSet<&str>> = partition
        .clusters
        .iter()
        .map(|c| c.iter().map(String::as_str).collect())
        .collect();
    sets.iter()
        .map(|set| {
            let s: BTreeSet<&str> = set.substitutes.iter().map(String::as_str).collect();
            let mut best: Option<(usize, f64)> = None;
            for (i, c) in clusters.iter().enumerate() {
                let inter = s.intersection(c).count();
                if inter == 0 {
                    continue;
                }
                let j = inter as f64 / (s.len() + c.len() - inter) as f64;
                if best.is_none_or(|(_, b)| j > b) {
                    best = Some((i, j));
                }
            }
            MentionAssignment {
                occurrence: set.occurrence.clone(),
                cluster: best.map(|(i, _)| i),
                jaccard: best.map_or(0.0, |(_, j)| j),
            }
        })
        .collect()
}

/// Reorder clusters by descending assigned-mention count, then by smallest
/// member, and renumber the assignments to match.
pub fn order_by_mentions(
    partition: SensePartition,
    assignments: Vec<MentionAssignment>,
) -> (SensePartition, Vec<MentionAssignment>) {
    let mut counts = vec![0usize; partition.clusters.len()];
    for a in &assignments {
        if let Some(c) = a.cluster {
            counts[c] += 1;
        }
    }
    let mut order: Vec<usize> = (0..partition.clusters.len()).collect();
    order.sort_by(|&a, &b| {
        counts[b]
            .cmp(&counts[a])
            .then_with(|| partition.clusters[a][0].cmp(&partition.clusters[b][0]))
    });
    let mut new_index = vec![0; order.len()];
    for (new, &old) in order.iter().enumerate() {
        new_index[old] = new;
    }
    let clusters = order.iter().map(|&i| partition.clusters[i].clone()).collect();
    let assignments = assignments
        .into_iter()
        .map(|a| MentionAssignment {
            cluster: a.cluster.map(|c| new_index[c]),
            ..a
        })
        .collect();
    (SensePartition { clusters, ..partition }, assignments)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SenseProfile {
    pub term: String,
    /// corpus -> mention count per cluster index
    pub counts: BTreeMap<String, Vec<u64>>,
    pub unassigned: BTreeMap<String, u64>,
}

impl SenseProfile {
    pub fn count(&self, corpus_id: &str, cluster: usize) -> u64 {
        self.counts
            .get(corpus_id)
            .and_then(|c| c.get(cluster))
            .copied()
            .unwrap_or(0)
    }

    pub fn total(&self, corpus_id: &str) -> u64 {
        self.counts.get(corpus_id).map_or(0, |c| c.iter().sum::<u64>())
            + self.unassigned.get(corpus_id).copied().unwrap_or(0)
    }
}

pub fn sense_profile(
    term: &str,
    assignments: &[MentionAssignment],
    n_clusters: usize,
    corpus_ids: &[String],
) -> SenseProfile {
    let mut counts: BTreeMap<String, Vec<u64>> = corpus_ids.iter().map(|c| (c.clone(), vec![0; n_clusters])).collect();
    let mut unassigned: BTreeMap<String, u64> = corpus_ids.iter().map(|c| (c.clone(), 0)).collect();
    for a in assignments {
        let corpus = &a.occurrence.corpus_id;
        match a.cluster {
            Some(c) => {
                counts.entry(corpus.clone()).or_insert_with(|| vec![0; n_clusters])[c] += 1;
            }
            None => *unassigned.entry(corpus.clone()).or_insert(0) += 1,
        }
    }
    SenseProfile {
        term: term.to_owned(),
        counts,
        unassigned,
    }
}

pub const TOP_MEMBERS: usize = 10;
pub const MAX_EXAMPLES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub index: usize,
    pub size: usize,
    /// Highest weighted degree first.
    pub top_members: Vec<String>,
    pub counts: BTreeMap<String, u64>,
    pub examples: Vec<Occurrence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SenseReport {
    pub term: String,
    pub mentions: usize,
    pub modularity: f64,
    pub clusters: Vec<ClusterSummary>,
    pub unassigned: BTreeMap<String, u64>,
}

/// Graph, partition, assignment and profile for one term's sense views.
pub fn induce_senses(
    term: &str,
    views: &[SubstituteSet],
    corpus_ids: &[String],
    resolution: f64,
    seed: u64,
) -> Result<(SenseReport, Vec<MentionAssignment>)> {
    let graph = build_cooccurrence_graph(term, views)?;
    let partition = louvain_partition(&graph, resolution, seed)?;
    let assignments = assign_mentions(views, &partition);
    let (partition, assignments) = order_by_mentions(partition, assignments);
    let profile = sense_profile(term, &assignments, partition.clusters.len(), corpus_ids);
    let degree = graph.degrees();

    let clusters = partition
        .clusters
        .iter()
        .enumerate()
        .map(|(index, members)| {
            let mut ranked: Vec<&String> = members.iter().collect();
            ranked.sort_by(|a, b| {
                let da = degree[graph.node_index(a).expect("member is a node")];
                let db = degree[graph.node_index(b).expect("member is a node")];
                db.cmp(&da).then_with(|| a.cmp(b))
            });
            ClusterSummary {
                index,
                size: members.len(),
                top_members: ranked.into_iter().take(TOP_MEMBERS).cloned().collect(),
                counts: corpus_ids
                    .iter()
                    .map(|c| (c.clone(), profile.count(c, index)))
                    .collect(),
                examples: assignments
                    .iter()
                    .filter(|a| a.cluster == Some(index))
                    .take(MAX_EXAMPLES)
                    .map(|a| a.occurrence.clone())
                    .collect(),
            }
        })
        .collect();
    Ok((
        SenseReport {
            term: term.to_owned(),
            mentions: views.len(),
            modularity: partition.modularity,
            clusters,
            unassigned: profile.unassigned,
        },
        assignments,
    ))
}
