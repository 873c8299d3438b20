//! Automatic relevance annotation.
//!
//! Each `⟨query, event, document⟩` triplet is split into a query–document
//! pair and an event–document pair, with two dictionaries remembering which
//! queries and events belong together. Stage one votes every pair with a zoo
//! of scorers; pairs the zoo agrees on are labelled directly and the rest go
//! to an LLM for a 0–4 grade. Labels are then mapped back to quadruplets.

pub mod agreement;
pub mod llm;
pub mod prompt;
pub mod vote;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::{Dataset, Doc, GradedExample, Quadruplet, TaskKind};
use llm::{fine_annotate, AuditRecord, LlmClient, LlmOptions};
use vote::{coarse_vote, ScorerSlot, ScorerSpec, VoteLabel, VoteOutcome};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RawTriplet {
    pub query_id: String,
    pub query: String,
    pub event_id: String,
    pub event: String,
    pub doc_id: String,
    pub doc: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    /// Query–document.
    Qd,
    /// Event–document.
    Ed,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairRecord {
    pub kind: PairKind,
    /// Query id for `Qd`, event id for `Ed`.
    pub left_id: String,
    pub left: String,
    pub doc_id: String,
    pub doc: String,
}

impl PairRecord {
    pub fn id(&self) -> String {
        let k = match self.kind {
            PairKind::Qd => "qd",
            PairKind::Ed => "ed",
        };
        format!("{k}:{}:{}", self.left_id, self.doc_id)
    }
}

/// Which queries and events were seen together, plus their texts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryDicts {
    pub query_to_events: BTreeMap<String, BTreeSet<String>>,
    pub event_to_queries: BTreeMap<String, BTreeSet<String>>,
    pub query_text: BTreeMap<String, String>,
    pub event_text: BTreeMap<String, String>,
}

/// One query–document and one event–document pair per triplet.
pub fn split_and_cache(triplets: &[RawTriplet]) -> Result<(Vec<PairRecord>, RecoveryDicts)> {
    let mut pairs = Vec::with_capacity(2 * triplets.len());
    let mut dicts = RecoveryDicts::default();
    for t in triplets {
        if t.query.trim().is_empty() || t.event.trim().is_empty() || t.doc.trim().is_empty() {
            return Err(Error::Config(format!(
                "triplet ({}, {}, {}) has an empty text",
                t.query_id, t.event_id, t.doc_id
            )));
        }
        pairs.push(PairRecord {
            kind: PairKind::Qd,
            left_id: t.query_id.clone(),
            left: t.query.clone(),
            doc_id: t.doc_id.clone(),
            doc: t.doc.clone(),
        });
        pairs.push(PairRecord {
            kind: PairKind::Ed,
            left_id: t.event_id.clone(),
            left: t.event.clone(),
            doc_id: t.doc_id.clone(),
            doc: t.doc.clone(),
        });
        dicts
            .query_to_events
            .entry(t.query_id.clone())
            .or_default()
            .insert(t.event_id.clone());
        dicts
            .event_to_queries
            .entry(t.event_id.clone())
            .or_default()
            .insert(t.query_id.clone());
        dicts.query_text.insert(t.query_id.clone(), t.query.clone());
        dicts.event_text.insert(t.event_id.clone(), t.event.clone());
    }
    Ok((pairs, dicts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Binary(bool),
    Grade(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    /// Query relevance, from a query–document pair.
    Rqd,
    /// Event relevance, from an event–document pair.
    Red,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Voting,
    Llm,
    Human,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledPair {
    pub pair: PairRecord,
    pub label: Label,
    pub source: LabelSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledQuadruplet {
    pub query_id: String,
    pub query: String,
    pub event_id: String,
    pub event: String,
    pub doc_id: String,
    pub doc: String,
    pub label: Label,
    pub label_kind: LabelKind,
    pub source: LabelSource,
}

/// Maps labelled pairs back to quadruplets: query–document labels go to the
/// query-centric set, event–document labels to the event-centric set. A pair
/// whose id is missing from the dictionaries is dropped.
pub fn restore_quadruplets(
    labeled: &[LabeledPair],
    dicts: &RecoveryDicts,
) -> (Vec<LabeledQuadruplet>, Vec<LabeledQuadruplet>) {
    let mut qc = Vec::new();
    let mut ec = Vec::new();
    let mut seen = HashSet::new();
    for lp in labeled {
        let p = &lp.pair;
        let partners = match p.kind {
            PairKind::Qd => dicts.query_to_events.get(&p.left_id),
            PairKind::Ed => dicts.event_to_queries.get(&p.left_id),
        };
        let Some(partners) = partners else {
            warn!("no dictionary entry for {}, dropping", p.id());
            continue;
        };
        for other in partners {
            let (qid, eid) = match p.kind {
                PairKind::Qd => (&p.left_id, other),
                PairKind::Ed => (other, &p.left_id),
            };
            let (Some(q), Some(e)) = (dicts.query_text.get(qid), dicts.event_text.get(eid)) else {
                warn!("missing text for ({qid}, {eid}), dropping {}", p.id());
                continue;
            };
            let label_kind = match p.kind {
                PairKind::Qd => LabelKind::Rqd,
                PairKind::Ed => LabelKind::Red,
            };
            if !seen.insert((qid.clone(), eid.clone(), p.doc_id.clone(), label_kind)) {
                continue;
            }
            let quad = LabeledQuadruplet {
                query_id: qid.clone(),
                query: q.clone(),
                event_id: eid.clone(),
                event: e.clone(),
                doc_id: p.doc_id.clone(),
                doc: p.doc.clone(),
                label: lp.label,
                label_kind,
                source: lp.source,
            };
            match label_kind {
                LabelKind::Rqd => qc.push(quad),
                LabelKind::Red => ec.push(quad),
            }
        }
    }
    (qc, ec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Voting only; hard pairs are left out.
    Coarse,
    /// LLM grades for the hard pairs only.
    Fine,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotationConfig {
    pub quorum: usize,
    pub scorers: Vec<ScorerSlot>,
    /// Width of the hashed embeddings behind the embedding scorers.
    pub embed_dim: usize,
    pub llm: LlmOptions,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self {
            quorum: 4,
            scorers: vote::default_slots(),
            embed_dim: 64,
            llm: LlmOptions::default(),
        }
    }
}

impl AnnotationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.quorum == 0 || self.quorum > self.scorers.len() {
            return Err(Error::Config(format!(
                "annotation.quorum {} must be between 1 and the {} scorers",
                self.quorum,
                self.scorers.len()
            )));
        }
        if self.scorers.iter().any(|s| !s.threshold.is_finite()) {
            return Err(Error::Config("annotation scorer thresholds must be finite".into()));
        }
        if self.embed_dim == 0 || self.llm.concurrency == 0 {
            return Err(Error::Config(
                "annotation.embed_dim and llm.concurrency must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRun {
    pub votes: Vec<(PairRecord, VoteOutcome)>,
    pub query_centric: Vec<LabeledQuadruplet>,
    pub event_centric: Vec<LabeledQuadruplet>,
    pub audit: Vec<AuditRecord>,
    /// Hard pairs the LLM could not label.
    pub unlabeled: usize,
}

impl AnnotationRun {
    pub fn count(&self, label: VoteLabel) -> usize {
        self.votes.iter().filter(|(_, v)| v.label == label).count()
    }
}

/// Runs the pipeline. Only `Hard` pairs ever reach `client`.
pub fn annotate(
    triplets: &[RawTriplet],
    scorers: &[ScorerSpec],
    quorum: usize,
    stage: Stage,
    client: Option<&dyn LlmClient>,
    llm: &LlmOptions,
) -> Result<AnnotationRun> {
    let (pairs, dicts) = split_and_cache(triplets)?;
    let mut votes = Vec::with_capacity(pairs.len());
    for p in pairs {
        let v = coarse_vote(&p.left, &p.doc, scorers, quorum)?;
        votes.push((p, v));
    }
    let mut labeled = Vec::new();
    if stage != Stage::Fine {
        for (p, v) in &votes {
            let label = match v.label {
                VoteLabel::EasyPositive => Label::Binary(true),
                VoteLabel::EasyNegative => Label::Binary(false),
                VoteLabel::Hard => continue,
            };
            labeled.push(LabeledPair {
                pair: p.clone(),
                label,
                source: LabelSource::Voting,
            });
        }
    }
    let mut audit = Vec::new();
    let mut unlabeled = 0;
    if stage != Stage::Coarse {
        let client = client.ok_or_else(|| {
            Error::Config("fine annotation needs an LLM endpoint or a stub fixture".into())
        })?;
        let hard: Vec<PairRecord> = votes
            .iter()
            .filter(|(_, v)| v.label == VoteLabel::Hard)
            .map(|(p, _)| p.clone())
            .collect();
        let out = fine_annotate(&hard, client, llm)?;
        for (p, g) in hard.into_iter().zip(out.grades) {
            match g {
                Some(g) => labeled.push(LabeledPair {
                    pair: p,
                    label: Label::Grade(g),
                    source: LabelSource::Llm,
                }),
                None => unlabeled += 1,
            }
        }
        audit = out.audit;
    }
    let (query_centric, event_centric) = restore_quadruplets(&labeled, &dicts);
    Ok(AnnotationRun {
        votes,
        query_centric,
        event_centric,
        audit,
        unlabeled,
    })
}

fn task_of(kind: LabelKind) -> TaskKind {
    match kind {
        LabelKind::Rqd => TaskKind::QueryCentric,
        LabelKind::Red => TaskKind::EventCentric,
    }
}

/// Stage-one training data from binary labels: each positive is paired
/// with a negative of the same `(query, event)` group in turn, or left for
/// mining when the group has none.
pub fn coarse_dataset(labeled: &[LabeledQuadruplet]) -> Dataset {
    type Group<'a> = (Vec<&'a LabeledQuadruplet>, Vec<&'a LabeledQuadruplet>);
    let mut groups: BTreeMap<(LabelKind, &str, &str), Group<'_>> = BTreeMap::new();
    for q in labeled {
        let Label::Binary(pos) = q.label else { continue };
        let g = groups
            .entry((q.label_kind, q.query_id.as_str(), q.event_id.as_str()))
            .or_default();
        if pos {
            g.0.push(q);
        } else {
            g.1.push(q);
        }
    }
    let mut data = Dataset::default();
    for ((kind, _, _), (pos, neg)) in groups {
        for (i, p) in pos.iter().enumerate() {
            let negative = (!neg.is_empty()).then(|| {
                let n = neg[i % neg.len()];
                Doc {
                    id: n.doc_id.clone(),
                    text: n.doc.clone(),
                }
            });
            let quad = Quadruplet {
                query_id: p.query_id.clone(),
                query: p.query.clone(),
                event: Some(p.event.clone()),
                positive: Doc {
                    id: p.doc_id.clone(),
                    text: p.doc.clone(),
                },
                negative: negative.filter(|n| n.id != p.doc_id),
            };
            match task_of(kind) {
                TaskKind::QueryCentric => data.query_centric.push(quad),
                TaskKind::EventCentric => data.event_centric.push(quad),
            }
        }
    }
    data
}

/// Stage-two examples. LLM grades are used as given; pairs the quorum
/// rejected count as grade 0 (off-topic), so hard pairs that all drew the
/// same grade still have something below them. Easy positives carry no
/// grade and are left out.
pub fn graded_examples(labeled: &[LabeledQuadruplet]) -> Vec<GradedExample> {
    labeled
        .iter()
        .filter_map(|q| {
            let grade = match q.label {
                Label::Grade(g) => g,
                Label::Binary(false) => 0,
                Label::Binary(true) => return None,
            };
            Some(GradedExample {
                query_id: q.query_id.clone(),
                query: q.query.clone(),
                event: Some(q.event.clone()),
                task: task_of(q.label_kind),
                doc: Doc {
                    id: q.doc_id.clone(),
                    text: q.doc.clone(),
                },
                grade,
            })
        })
        .collect()
}
