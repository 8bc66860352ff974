//! Near-duplicate clustering of embeddings, cluster ranking, per-cluster
//! keyword frequencies and reference-matched cluster shares.
//!
//! Clustering is greedy leader clustering over ids in ascending order: each
//! vector joins the existing cluster whose leader it is most similar to
//! (lowest cluster wins ties) provided that similarity is at least `tau`,
//! and otherwise founds a new cluster as its leader.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{dot, EmbeddingMatrix, EmbeddingVector, Modality};
use crate::error::{Error, Result};
use crate::ingest::{write_file, DatasetSlice};
use crate::text;

pub const DEFAULT_TAU: f64 = 0.9;
pub const DEFAULT_TOP_N: usize = 30;

/// Leader counts at or above this score candidates in parallel.
const PARALLEL_LEADERS: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub cluster_id: usize,
    pub leader_id: u64,
    pub member_ids: Vec<u64>,
    /// Mean cosine similarity over all member pairs; 1 for singletons.
    pub coherence: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub keyword_freqs: Vec<(String, u64)>,
}

impl Cluster {
    pub fn size(&self) -> usize {
        self.member_ids.len()
    }

    fn min_member(&self) -> u64 {
        self.member_ids[0]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSource {
    pub backend_id: String,
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub tau: f64,
    pub omitted_ids: Vec<usize>,
    pub source: ClusterSource,
    pub clusters: Vec<Cluster>,
}

impl Clustering {
    pub fn is_omitted(&self, cluster_id: usize) -> bool {
        self.omitted_ids.binary_search(&cluster_id).is_ok()
    }

    /// Non-omitted clusters in rank order.
    pub fn reported(&self) -> impl Iterator<Item = &Cluster> {
        self.clusters.iter().filter(|c| !self.is_omitted(c.cluster_id))
    }

    pub fn record_count(&self) -> usize {
        self.clusters.iter().map(Cluster::size).sum()
    }

    pub fn get(&self, cluster_id: usize) -> Option<&Cluster> {
        self.clusters.get(cluster_id).filter(|c| c.cluster_id == cluster_id)
    }

    /// Check partition, ordering and id invariants.
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Integrity(format!("tau {} outside (0, 1]", self.tau)));
        }
        let mut seen = HashSet::new();
        for (i, c) in self.clusters.iter().enumerate() {
            if c.cluster_id != i {
                return Err(Error::Integrity(format!(
                    "cluster at position {i} has id {}",
                    c.cluster_id
                )));
            }
            if c.member_ids.is_empty() {
                return Err(Error::Integrity(format!("cluster {i} is empty")));
            }
            if c.member_ids.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Integrity(format!(
                    "cluster {i} members are not strictly ascending"
                )));
            }
            if c.member_ids.binary_search(&c.leader_id).is_err() {
                return Err(Error::Integrity(format!("cluster {i} leader is not a member")));
            }
            for &m in &c.member_ids {
                if !seen.insert(m) {
                    return Err(Error::Integrity(format!("record {m} in two clusters")));
                }
            }
        }
        if self
            .clusters
            .windows(2)
            .any(|w| rank_key(&w[0]) > rank_key(&w[1]))
        {
            return Err(Error::Integrity("clusters are not in rank order".into()));
        }
        if self.omitted_ids.windows(2).any(|w| w[0] >= w[1])
            || self.omitted_ids.iter().any(|&i| i >= self.clusters.len())
        {
            return Err(Error::Integrity("omitted_ids malformed".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("clustering serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Clustering =
            serde_json::from_str(text).map_err(|e| Error::parse("clustering", e))?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn rank_key(c: &Cluster) -> (std::cmp::Reverse<usize>, u64) {
    (std::cmp::Reverse(c.size()), c.min_member())
}

/// Mean pairwise cosine of unit vectors via |Σv|² = n + 2·Σ_{i<j} v_i·v_j.
fn mean_pairwise_cosine(vectors: &[&EmbeddingVector]) -> f64 {
    let n = vectors.len();
    if n < 2 {
        return 1.0;
    }
    let dim = vectors[0].dim();
    let mut sum = vec![0f64; dim];
    let mut self_dots = 0f64;
    for v in vectors {
        let mut sq = 0f64;
        for (s, &x) in sum.iter_mut().zip(v.values()) {
            *s += f64::from(x);
            sq += f64::from(x) * f64::from(x);
        }
        self_dots += sq;
    }
    let total: f64 = sum.iter().map(|s| s * s).sum();
    let pairs = (n * (n - 1) / 2) as f64;
    ((total - self_dots) / 2.0 / pairs).clamp(-1.0, 1.0)
}

pub fn cluster_embeddings(m: &EmbeddingMatrix, tau: f64) -> Result<Clustering> {
    if m.is_empty() {
        return Err(Error::EmptyInput("cannot cluster an empty matrix".into()));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::usage(format!("tau must lie in (0, 1], got {tau}")));
    }
    let vectors = m.vectors();
    let mut leaders: Vec<usize> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();

    for (row, v) in vectors.iter().enumerate() {
        let sims: Vec<f64> = if leaders.len() >= PARALLEL_LEADERS {
            leaders
                .par_iter()
                .map(|&l| dot(vectors[l].values(), v.values()))
                .collect()
        } else {
            leaders
                .iter()
                .map(|&l| dot(vectors[l].values(), v.values()))
                .collect()
        };
        let mut best: Option<(usize, f64)> = None;
        for (k, &s) in sims.iter().enumerate() {
            if s >= tau && best.is_none_or(|(_, b)| s > b) {
                best = Some((k, s));
            }
        }
        match best {
            Some((k, _)) => members[k].push(row),
            None => {
                leaders.push(row);
                members.push(vec![row]);
            }
        }
    }

    let ids = m.ids();
    let clusters = leaders
        .iter()
        .zip(&members)
        .enumerate()
        .map(|(k, (&leader, rows))| {
            let vs: Vec<&EmbeddingVector> = rows.iter().map(|&r| &vectors[r]).collect();
            Cluster {
                cluster_id: k,
                leader_id: ids[leader],
                member_ids: rows.iter().map(|&r| ids[r]).collect(),
                coherence: mean_pairwise_cosine(&vs),
                keyword_freqs: Vec::new(),
            }
        })
        .collect();

    Ok(rank_clusters(Clustering {
        tau,
        omitted_ids: Vec::new(),
        source: ClusterSource {
            backend_id: m.backend_id().to_string(),
            modality: m.modality(),
            slice: None,
        },
        clusters,
    }))
}

/// Sort clusters by size (descending) then smallest member id, and renumber
/// them densely. Omitted ids follow their clusters.
pub fn rank_clusters(mut c: Clustering) -> Clustering {
    let omitted: BTreeSet<usize> = c.omitted_ids.iter().copied().collect();
    c.clusters.sort_by_key(rank_key);
    let mut new_omitted = Vec::new();
    for (i, cl) in c.clusters.iter_mut().enumerate() {
        if omitted.contains(&cl.cluster_id) {
            new_omitted.push(i);
        }
        cl.cluster_id = i;
    }
    c.omitted_ids = new_omitted;
    c
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseRule {
    Manual(Vec<usize>),
    CoherenceBelow(f64),
}

/// Mark clusters as noise. They stay in the partition but are left out of reports.
pub fn mark_noise(c: &Clustering, rule: &NoiseRule) -> Result<Clustering> {
    let picked: Vec<usize> = match rule {
        NoiseRule::Manual(ids) => {
            if let Some(bad) = ids.iter().find(|&&i| i >= c.clusters.len()) {
                return Err(Error::usage(format!("unknown cluster id {bad}")));
            }
            ids.clone()
        }
        NoiseRule::CoherenceBelow(x) => c
            .clusters
            .iter()
            .filter(|cl| cl.coherence < *x)
            .map(|cl| cl.cluster_id)
            .collect(),
    };
    let mut out = c.clone();
    let mut all: BTreeSet<usize> = out.omitted_ids.iter().copied().collect();
    all.extend(picked);
    out.omitted_ids = all.into_iter().collect();
    Ok(out)
}

/// Words never counted in keyword tables.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Stopwords(HashSet<String>);

impl Stopwords {
    pub fn none() -> Self {
        Stopwords(HashSet::new())
    }

    /// The built-in function-word list.
    pub fn builtin() -> Self {
        Stopwords(text::DEFAULT_STOPWORDS.iter().map(|w| w.to_string()).collect())
    }

    /// One word per line; blank lines and `#` comments ignored.
    pub fn parse(contents: &str) -> Self {
        Stopwords(
            contents
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_lowercase)
                .collect(),
        )
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word)
    }
}

impl FromIterator<String> for Stopwords {
    fn from_iter<I: IntoIterator<Item = String>>(iter: I) -> Self {
        Stopwords(iter.into_iter().collect())
    }
}

/// Total occurrences of every non-stopword over the captions of `ids`.
pub fn word_counts(
    ids: &[u64],
    slice: &DatasetSlice,
    stopwords: &Stopwords,
) -> Result<BTreeMap<String, u64>> {
    let mut counts = BTreeMap::new();
    for &id in ids {
        let rec = slice
            .get(id)
            .ok_or_else(|| Error::Integrity(format!("record {id} not found in slice")))?;
        for w in text::terms(&rec.caption, true) {
            if !stopwords.contains(&w) {
                *counts.entry(w).or_insert(0u64) += 1;
            }
        }
    }
    Ok(counts)
}

/// Top-`k` words by count, ties broken lexicographically.
pub fn frequent_words(
    cluster: &Cluster,
    slice: &DatasetSlice,
    stopwords: &Stopwords,
    k: usize,
) -> Result<Vec<(String, u64)>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut ranked: Vec<(String, u64)> = word_counts(&cluster.member_ids, slice, stopwords)?
        .into_iter()
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}

/// Fill `keyword_freqs` for every cluster.
pub fn annotate_keywords(
    c: &Clustering,
    slice: &DatasetSlice,
    stopwords: &Stopwords,
    k: usize,
) -> Result<Clustering> {
    let mut out = c.clone();
    for cl in &mut out.clusters {
        cl.keyword_freqs = frequent_words(cl, slice, stopwords, k)?;
    }
    out.source.slice = Some(slice.name().to_string());
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Denominator {
    All,
    NonOmitted,
}

impl FromStr for Denominator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Denominator::All),
            "non-omitted" | "non_omitted" => Ok(Denominator::NonOmitted),
            other => Err(Error::usage(format!(
                "unknown denominator `{other}` (expected all or non-omitted)"
            ))),
        }
    }
}

/// A reference embedding and the leader similarity at which a cluster matches it.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceMatch<'a> {
    pub vector: &'a EmbeddingVector,
    pub tau_ref: f64,
}

impl ReferenceMatch<'_> {
    fn matches(&self, cluster: &Cluster, m: &EmbeddingMatrix) -> Result<bool> {
        if self.vector.dim() != m.dim() {
            return Err(Error::usage(format!(
                "reference dim {} does not match matrix dim {}",
                self.vector.dim(),
                m.dim()
            )));
        }
        let leader = m.get(cluster.leader_id).ok_or_else(|| {
            Error::Integrity(format!("leader {} missing from matrix", cluster.leader_id))
        })?;
        Ok(dot(leader.values(), self.vector.values()) >= self.tau_ref)
    }
}

/// Fraction of records lying in clusters whose leader matches the reference.
pub fn cluster_share(
    c: &Clustering,
    m: &EmbeddingMatrix,
    reference: ReferenceMatch<'_>,
    denominator: Denominator,
) -> Result<f64> {
    if reference.vector.dim() != m.dim() {
        return Err(Error::usage(format!(
            "reference dim {} does not match matrix dim {}",
            reference.vector.dim(),
            m.dim()
        )));
    }
    let mut total = 0usize;
    let mut matched = 0usize;
    for cl in &c.clusters {
        if denominator == Denominator::NonOmitted && c.is_omitted(cl.cluster_id) {
            continue;
        }
        total += cl.size();
        if reference.matches(cl, m)? {
            matched += cl.size();
        }
    }
    if total == 0 {
        return Err(Error::degenerate("share denominator is empty"));
    }
    Ok(matched as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistributionRow {
    pub rank: usize,
    pub size: usize,
    pub matches_reference: bool,
}

/// Sizes of the top `top_n` reported clusters, flagged by reference match.
pub fn size_distribution(
    c: &Clustering,
    m: &EmbeddingMatrix,
    reference: Option<ReferenceMatch<'_>>,
    top_n: usize,
) -> Result<Vec<DistributionRow>> {
    c.reported()
        .take(top_n)
        .enumerate()
        .map(|(i, cl)| {
            Ok(DistributionRow {
                rank: i + 1,
                size: cl.size(),
                matches_reference: match reference {
                    Some(r) => r.matches(cl, m)?,
                    None => false,
                },
            })
        })
        .collect()
}
