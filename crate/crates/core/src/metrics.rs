//! Offline ranking metrics over graded judgments.
//!
//! Runs and judgments are keyed by query id. Recall and MAP only average over
//! queries that have at least one relevant judged document; MRR averages over
//! every query in the run.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JudgedPair {
    pub query_id: String,
    pub doc_id: String,
    pub grade: u8,
}

/// Ranked doc ids per query, best first.
pub type Run = BTreeMap<String, Vec<String>>;

/// Grades indexed by query then doc.
#[derive(Debug, Clone, Default)]
pub struct Judgments {
    grades: HashMap<String, HashMap<String, u8>>,
}

impl Judgments {
    pub fn new(pairs: &[JudgedPair]) -> Self {
        let mut grades: HashMap<String, HashMap<String, u8>> = HashMap::new();
        for p in pairs {
            grades
                .entry(p.query_id.clone())
                .or_default()
                .insert(p.doc_id.clone(), p.grade);
        }
        Self { grades }
    }

    pub fn grade(&self, query: &str, doc: &str) -> Option<u8> {
        self.grades.get(query)?.get(doc).copied()
    }

    fn matching(&self, query: &str, pred: &dyn Fn(u8) -> bool) -> HashSet<&str> {
        self.grades
            .get(query)
            .map(|m| {
                m.iter()
                    .filter(|(_, &g)| pred(g))
                    .map(|(d, _)| d.as_str())
                    .collect()
            })
            .unwrap_or_default()
    }
}

/// Default relevance: grade 2 or higher.
pub fn relevant(grade: u8) -> bool {
    grade >= 2
}

/// Default event relevance: grade 4.
pub fn event_relevant(grade: u8) -> bool {
    grade == 4
}

fn per_query<F>(run: &Run, judged: &Judgments, pred: &dyn Fn(u8) -> bool, f: F) -> Result<f64>
where
    F: Fn(&[String], &HashSet<&str>) -> f64,
{
    let mut total = 0.0;
    let mut n = 0usize;
    for (q, ranking) in run {
        let rel = judged.matching(q, pred);
        if rel.is_empty() {
            continue;
        }
        total += f(ranking, &rel);
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoJudgedRelevant);
    }
    Ok(total / n as f64)
}

pub fn recall_at_k(run: &Run, judged: &Judgments, k: usize, pred: &dyn Fn(u8) -> bool) -> Result<f64> {
    per_query(run, judged, pred, |ranking, rel| {
        let hits = ranking
            .iter()
            .take(k)
            .filter(|d| rel.contains(d.as_str()))
            .count();
        hits as f64 / rel.len() as f64
    })
}

/// AP@k: precision at each relevant hit within the cutoff, summed and
/// divided by the number of relevant documents, so it never drops as `k`
/// grows.
pub fn map_at_k(run: &Run, judged: &Judgments, k: usize, pred: &dyn Fn(u8) -> bool) -> Result<f64> {
    per_query(run, judged, pred, |ranking, rel| {
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (i, d) in ranking.iter().take(k).enumerate() {
            if rel.contains(d.as_str()) {
                hits += 1;
                sum += hits as f64 / (i + 1) as f64;
            }
        }
        sum / rel.len() as f64
    })
}

/// Mean reciprocal rank of the first event-relevant document; 0 for a
/// query whose ranking contains none. 0 for an empty run.
pub fn mrr(run: &Run, judged: &Judgments, pred: &dyn Fn(u8) -> bool) -> f64 {
    if run.is_empty() {
        return 0.0;
    }
    let total: f64 = run
        .iter()
        .map(|(q, ranking)| {
            ranking
                .iter()
                .position(|d| judged.grade(q, d).is_some_and(pred))
                .map_or(0.0, |i| 1.0 / (i + 1) as f64)
        })
        .sum();
    total / run.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub queries: usize,
    pub k: usize,
    pub recall: f64,
    pub map: f64,
    pub mrr: f64,
}

/// Grade thresholds and cutoff for an evaluation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    /// Grades at or above this count as relevant for recall and MAP.
    pub relevant_min_grade: u8,
    /// Grades at or above this count as event-relevant for MRR.
    pub event_min_grade: u8,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 50,
            relevant_min_grade: 2,
            event_min_grade: 4,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.relevant_min_grade > 4 || self.event_min_grade > 4 {
            return Err(Error::Config(
                "eval.k must be >= 1 and grade thresholds at most 4".into(),
            ));
        }
        Ok(())
    }
}

pub fn evaluate(run: &Run, judged: &Judgments, config: &EvalConfig) -> Result<EvalReport> {
    let rel = |g: u8| g >= config.relevant_min_grade;
    let ev = |g: u8| g >= config.event_min_grade;
    Ok(EvalReport {
        queries: run.len(),
        k: config.k,
        recall: recall_at_k(run, judged, config.k, &rel)?,
        map: map_at_k(run, judged, config.k, &rel)?,
        mrr: mrr(run, judged, &ev),
    })
}
