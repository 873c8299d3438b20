//! Event expansion: turn a stream of news titles into deduplicated events
//! with popularity, then pick at most one event per query.

use std::collections::HashSet;

use chrono::{DateTime, Utc};
use log::debug;
use regex::RegexBuilder;
use serde::{Deserialize, Serialize};

use crate::embed::{cosine, TextEmbedder};
use crate::error::{Error, Result};
use crate::text::split_words;

/// Words kept by [`reformulate`]: the event field's length minus the two
/// special tokens.
pub const MAX_EVENT_WORDS: usize = 34;

/// Slack when comparing a cosine with the clustering threshold, so that
/// identical texts always join at threshold 1.
const SIM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventTitle {
    pub title: String,
    pub source: String,
    pub found_time: DateTime<Utc>,
}

impl EventTitle {
    pub fn validate(&self) -> Result<()> {
        if self.title.trim().is_empty() {
            return Err(Error::Config("event title is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub id: String,
    pub text: String,
    pub found_time: DateTime<Utc>,
    /// Number of titles in the cluster.
    pub popularity: usize,
    #[serde(skip)]
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterRules {
    /// Bounds on the trimmed title, in characters.
    pub min_len: usize,
    pub max_len: usize,
    /// Case-insensitive regular expressions; a matching title is dropped.
    pub blocklist: Vec<String>,
    pub dedup: bool,
}

impl Default for FilterRules {
    fn default() -> Self {
        Self {
            min_len: 4,
            max_len: 300,
            blocklist: Vec::new(),
            dedup: true,
        }
    }
}

/// Drops titles that break a rule, keeping the input order. Exact
/// duplicates (after trimming) keep their first occurrence.
pub fn coarse_filter(titles: &[EventTitle], rules: &FilterRules) -> Result<Vec<EventTitle>> {
    let patterns = rules
        .blocklist
        .iter()
        .map(|p| {
            RegexBuilder::new(p)
                .case_insensitive(true)
                .build()
                .map_err(|e| Error::Config(format!("blocklist pattern {p:?}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for t in titles {
        let text = t.title.trim();
        let len = text.chars().count();
        if len < rules.min_len || len > rules.max_len {
            continue;
        }
        if patterns.iter().any(|p| p.is_match(text)) {
            continue;
        }
        if rules.dedup && !seen.insert(text.to_string()) {
            continue;
        }
        out.push(t.clone());
    }
    Ok(out)
}

/// Cluster membership as indices into the filtered titles.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub members: Vec<usize>,
    centroid_sum: Vec<f64>,
}

impl Cluster {
    pub fn centroid(&self) -> Vec<f64> {
        let n = self.members.len() as f64;
        self.centroid_sum.iter().map(|v| v / n).collect()
    }
}

/// Single greedy pass: each title joins the first cluster whose centroid is
/// at least `threshold` similar, otherwise it starts a new one.
pub fn greedy_cluster(embeddings: &[Vec<f64>], threshold: f64) -> Vec<Cluster> {
    let mut clusters: Vec<Cluster> = Vec::new();
    for (i, e) in embeddings.iter().enumerate() {
        let hit = clusters
            .iter()
            .position(|c| cosine(&c.centroid(), e) >= threshold - SIM_TOLERANCE);
        match hit {
            Some(c) => {
                let c = &mut clusters[c];
                c.members.push(i);
                for (s, v) in c.centroid_sum.iter_mut().zip(e) {
                    *s += v;
                }
            }
            None => clusters.push(Cluster {
                members: vec![i],
                centroid_sum: e.clone(),
            }),
        }
    }
    clusters
}

/// Clusters the titles and emits one record per cluster. Titles are compared
/// after reformulation, so source tags and suffixes do not split a cluster.
/// The earliest title represents the cluster (input order breaks time ties).
pub fn fine_filter_and_cluster(
    titles: &[EventTitle],
    threshold: f64,
    embedder: &dyn TextEmbedder,
    reformulator: &dyn Reformulator,
) -> Vec<EventRecord> {
    let cleaned: Vec<String> = titles.iter().map(|t| reformulator.reformulate(&t.title)).collect();
    let embeddings: Vec<Vec<f64>> = cleaned.iter().map(|t| embedder.embed(t)).collect();
    let clusters = greedy_cluster(&embeddings, threshold);
    debug!("{} titles formed {} clusters", titles.len(), clusters.len());
    clusters
        .iter()
        .enumerate()
        .map(|(n, c)| {
            let rep = *c
                .members
                .iter()
                .min_by_key(|&&i| (titles[i].found_time, i))
                .expect("clusters are never empty");
            EventRecord {
                id: format!("ev{n:05}"),
                embedding: embeddings[rep].clone(),
                text: cleaned[rep].clone(),
                found_time: titles[rep].found_time,
                popularity: c.members.len(),
            }
        })
        .collect()
}

/// Turns a raw title into event text.
pub trait Reformulator: Send + Sync {
    fn reformulate(&self, title: &str) -> String;
}

/// Rule-based cleanup; see [`reformulate`].
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleReformulator;

impl Reformulator for RuleReformulator {
    fn reformulate(&self, title: &str) -> String {
        reformulate(title)
    }
}

const TAG_PREFIXES: [&str; 5] = ["breaking:", "update:", "live:", "exclusive:", "watch:"];
const SEPARATORS: [&str; 4] = [" — ", " – ", " | ", " - "];

fn strip_prefixes(mut s: &str) -> &str {
    loop {
        s = s.trim_start();
        let before = s.len();
        if let Some(rest) = s.strip_prefix('[').and_then(|r| r.split_once(']')) {
            s = rest.1;
        } else if let Some(rest) = s.strip_prefix('(').and_then(|r| r.split_once(')')) {
            s = rest.1;
        } else if let Some(p) = TAG_PREFIXES
            .iter()
            .find(|p| s.get(..p.len()).is_some_and(|h| h.eq_ignore_ascii_case(p)))
        {
            s = &s[p.len()..];
        }
        if s.len() == before {
            return s;
        }
    }
}

/// Strips bracketed and tag prefixes, keeps the part before the first
/// source separator, collapses whitespace and keeps at most
/// [`MAX_EVENT_WORDS`] words. Falls back to the input when nothing is left.
pub fn reformulate(title: &str) -> String {
    let mut s = strip_prefixes(title);
    let cut = SEPARATORS.iter().filter_map(|sep| s.find(sep)).min();
    if let Some(cut) = cut {
        s = &s[..cut];
    }
    let words: Vec<&str> = s.split_whitespace().take(MAX_EVENT_WORDS).collect();
    if words.is_empty() {
        title.to_string()
    } else {
        words.join(" ")
    }
}

/// Records plus a read-only view for association.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventIndex {
    pub records: Vec<EventRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    /// Position in [`EventIndex::records`].
    pub record: usize,
    pub relevance: f64,
}

impl EventIndex {
    pub fn new(records: Vec<EventRecord>) -> Result<Self> {
        let mut ids = HashSet::new();
        let dim = records.first().map(|r| r.embedding.len());
        for r in &records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            if Some(r.embedding.len()) != dim {
                return Err(Error::DimensionMismatch(format!(
                    "event {} has a {}-wide embedding, expected {}",
                    r.id,
                    r.embedding.len(),
                    dim.unwrap_or(0)
                )));
            }
            if r.popularity == 0 {
                return Err(Error::Config(format!("event {} has popularity 0", r.id)));
            }
        }
        Ok(Self { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Exact top-`n` by cosine; ties go to the smaller event id.
    pub fn associate(&self, query: &[f64], n: usize) -> Vec<Candidate> {
        let mut all: Vec<Candidate> = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| Candidate {
                record: i,
                relevance: cosine(query, &r.embedding),
            })
            .collect();
        all.sort_by(|a, b| {
            b.relevance
                .total_cmp(&a.relevance)
                .then_with(|| self.records[a.record].id.cmp(&self.records[b.record].id))
        });
        all.truncate(n);
        all
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankFeatures {
    pub relevance: f64,
    /// `exp(-age / half_life · ln 2)`, 1 for events from the future.
    pub recency: f64,
    /// Popularity over the largest popularity among the candidates.
    pub popularity_norm: f64,
}

pub trait EventRanker {
    fn score(&self, f: &RankFeatures) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankWeights {
    pub relevance: f64,
    pub recency: f64,
    pub popularity: f64,
}

impl Default for RankWeights {
    fn default() -> Self {
        Self {
            relevance: 1.0,
            recency: 0.2,
            popularity: 0.1,
        }
    }
}

impl EventRanker for RankWeights {
    fn score(&self, f: &RankFeatures) -> f64 {
        self.relevance * f.relevance + self.recency * f.recency + self.popularity * f.popularity_norm
    }
}

pub fn recency(found: DateTime<Utc>, now: DateTime<Utc>, half_life_hours: f64) -> f64 {
    let age_h = (now - found).num_milliseconds() as f64 / 3_600_000.0;
    (-age_h.max(0.0) / half_life_hours * std::f64::consts::LN_2).exp()
}

pub fn rank_features(
    candidates: &[Candidate],
    records: &[EventRecord],
    now: DateTime<Utc>,
    half_life_hours: f64,
) -> Vec<RankFeatures> {
    let max_pop = candidates
        .iter()
        .map(|c| records[c.record].popularity)
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    candidates
        .iter()
        .map(|c| {
            let r = &records[c.record];
            RankFeatures {
                relevance: c.relevance,
                recency: recency(r.found_time, now, half_life_hours),
                popularity_norm: r.popularity as f64 / max_pop,
            }
        })
        .collect()
}

/// Index of the best-scoring candidate, or `None` when even the best one is
/// below `floor`. The first candidate wins ties.
pub fn rank_and_select(
    features: &[RankFeatures],
    ranker: &dyn EventRanker,
    floor: f64,
) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, f) in features.iter().enumerate() {
        let s = ranker.score(f);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.filter(|&(_, s)| s >= floor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EventConfig {
    pub rules: FilterRules,
    pub sim_threshold: f64,
    /// Width of the hashed embeddings used for clustering and association.
    pub embed_dim: usize,
    pub candidates: usize,
    pub weights: RankWeights,
    pub half_life_hours: f64,
    pub floor: f64,
}

impl Default for EventConfig {
    fn default() -> Self {
        Self {
            rules: FilterRules::default(),
            sim_threshold: 0.8,
            embed_dim: 256,
            candidates: 10,
            weights: RankWeights::default(),
            half_life_hours: 24.0,
            floor: 0.6,
        }
    }
}

impl EventConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("event.{m}")));
        if self.rules.min_len > self.rules.max_len {
            return bad("rules.min_len exceeds rules.max_len");
        }
        if !(-1.0..=1.0).contains(&self.sim_threshold) {
            return bad("sim_threshold must lie in [-1, 1]");
        }
        if self.embed_dim == 0 || self.candidates == 0 {
            return bad("embed_dim and candidates must be >= 1");
        }
        if !(self.half_life_hours > 0.0 && self.half_life_hours.is_finite()) {
            return bad("half_life_hours must be positive");
        }
        let w = &self.weights;
        if ![w.relevance, w.recency, w.popularity, self.floor].iter().all(|v| v.is_finite()) {
            return bad("weights and floor must be finite");
        }
        Ok(())
    }
}

/// Runs filter, clustering and reformulation end to end.
pub fn build_event_index(
    titles: &[EventTitle],
    config: &EventConfig,
    embedder: &dyn TextEmbedder,
) -> Result<EventIndex> {
    for t in titles {
        t.validate()?;
    }
    let kept = coarse_filter(titles, &config.rules)?;
    EventIndex::new(fine_filter_and_cluster(
        &kept,
        config.sim_threshold,
        embedder,
        &RuleReformulator,
    ))
}

/// The expansion event for a query, if any clears the floor.
pub fn expand<'a>(
    query: &str,
    index: &'a EventIndex,
    config: &EventConfig,
    embedder: &dyn TextEmbedder,
    now: DateTime<Utc>,
) -> Option<&'a EventRecord> {
    if index.is_empty() || split_words(query).is_empty() {
        return None;
    }
    let cands = index.associate(&embedder.embed(query), config.candidates);
    let feats = rank_features(&cands, &index.records, now, config.half_life_hours);
    rank_and_select(&feats, &config.weights, config.floor).map(|(i, _)| &index.records[cands[i].record])
}
