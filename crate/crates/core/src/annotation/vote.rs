//! Stage-one voting: several relevance scorers, each thresholded into a
//! binary vote, combined by a quorum.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::embed::{cosine, feature_vector, Features, HashedBagEmbedder, TextEmbedder};
use crate::error::{Error, Result};
use crate::text::split_words;

/// A relevance scorer over `(query or event text, document text)`.
pub trait Scorer: Send + Sync {
    fn score(&self, left: &str, doc: &str) -> Result<f64>;
}

#[derive(Clone)]
pub struct ScorerSpec {
    pub name: String,
    pub threshold: f64,
    pub scorer: Arc<dyn Scorer>,
}

impl fmt::Debug for ScorerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScorerSpec")
            .field("name", &self.name)
            .field("threshold", &self.threshold)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteLabel {
    EasyPositive,
    EasyNegative,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteOutcome {
    pub label: VoteLabel,
    /// `None` where the scorer failed and abstained.
    pub votes: Vec<Option<bool>>,
    pub scores: Vec<Option<f64>>,
}

/// Thresholds every score into a vote (at or above the threshold is
/// positive). A quorum of positive votes gives `EasyPositive`, a quorum of
/// negative votes `EasyNegative`, anything else `Hard`.
pub fn coarse_vote(left: &str, doc: &str, scorers: &[ScorerSpec], quorum: usize) -> Result<VoteOutcome> {
    if quorum == 0 || scorers.len() < quorum {
        return Err(Error::Config(format!(
            "quorum {quorum} needs at least that many scorers, got {}",
            scorers.len()
        )));
    }
    let mut votes = Vec::with_capacity(scorers.len());
    let mut scores = Vec::with_capacity(scorers.len());
    for s in scorers {
        match s.scorer.score(left, doc) {
            Ok(v) if v.is_finite() => {
                scores.push(Some(v));
                votes.push(Some(v >= s.threshold));
            }
            Ok(_) | Err(_) => {
                debug!("scorer {} abstained", s.name);
                scores.push(None);
                votes.push(None);
            }
        }
    }
    let pos = votes.iter().filter(|v| **v == Some(true)).count();
    let neg = votes.iter().filter(|v| **v == Some(false)).count();
    let label = if pos >= quorum {
        VoteLabel::EasyPositive
    } else if neg >= quorum {
        VoteLabel::EasyNegative
    } else {
        if pos + neg < quorum {
            debug!("only {} scorers voted, quorum {quorum} unreachable", pos + neg);
        }
        VoteLabel::Hard
    };
    Ok(VoteOutcome {
        label,
        votes,
        scores,
    })
}

/// Okapi BM25 with corpus statistics fixed at construction.
#[derive(Debug, Clone)]
pub struct Bm25 {
    k1: f64,
    b: f64,
    n_docs: usize,
    avg_len: f64,
    df: HashMap<String, usize>,
}

impl Bm25 {
    pub fn new<'a, I: IntoIterator<Item = &'a str>>(corpus: I) -> Self {
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut n_docs = 0;
        let mut total_len = 0;
        for doc in corpus {
            let mut words = split_words(doc);
            total_len += words.len();
            n_docs += 1;
            words.sort_unstable();
            words.dedup();
            for w in words {
                *df.entry(w).or_default() += 1;
            }
        }
        Self {
            k1: 1.2,
            b: 0.75,
            n_docs,
            avg_len: if n_docs == 0 { 0.0 } else { total_len as f64 / n_docs as f64 },
            df,
        }
    }

    /// Non-negative idf, `ln(1 + (N - df + 0.5) / (df + 0.5))`.
    pub fn idf(&self, term: &str) -> f64 {
        let df = self.df.get(term).copied().unwrap_or(0) as f64;
        (1.0 + (self.n_docs as f64 - df + 0.5) / (df + 0.5)).ln()
    }
}

impl Scorer for Bm25 {
    fn score(&self, left: &str, doc: &str) -> Result<f64> {
        if self.n_docs == 0 {
            return Err(Error::EmptyCorpus);
        }
        let words = split_words(doc);
        let mut tf: HashMap<&str, usize> = HashMap::new();
        for w in &words {
            *tf.entry(w.as_str()).or_default() += 1;
        }
        let norm = self.k1 * (1.0 - self.b + self.b * words.len() as f64 / self.avg_len.max(1e-9));
        Ok(split_words(left)
            .iter()
            .map(|t| {
                let f = tf.get(t.as_str()).copied().unwrap_or(0) as f64;
                self.idf(t) * f * (self.k1 + 1.0) / (f + norm)
            })
            .sum())
    }
}

/// Cosine between hashed bag-of-feature embeddings of the two texts.
#[derive(Debug, Clone)]
pub struct CosineScorer(pub HashedBagEmbedder);

impl Scorer for CosineScorer {
    fn score(&self, left: &str, doc: &str) -> Result<f64> {
        Ok(cosine(&self.0.embed(left), &self.0.embed(doc)))
    }
}

/// Late-interaction score: each left feature takes its best cosine against
/// any document feature, averaged over left features.
#[derive(Debug, Clone)]
pub struct MaxSimScorer {
    pub dim: usize,
    pub features: Features,
}

impl Scorer for MaxSimScorer {
    fn score(&self, left: &str, doc: &str) -> Result<f64> {
        let lf = self.features.extract(left);
        let df: Vec<Vec<f64>> = self
            .features
            .extract(doc)
            .iter()
            .map(|f| feature_vector(f, self.dim))
            .collect();
        if lf.is_empty() || df.is_empty() {
            return Ok(0.0);
        }
        let total: f64 = lf
            .iter()
            .map(|f| {
                let v = feature_vector(f, self.dim);
                df.iter()
                    .map(|d| cosine(&v, d))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .sum();
        Ok(total / lf.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Words,
    WordBigrams,
    CharTrigrams,
    Prefix4,
}

impl From<FeatureKind> for Features {
    fn from(k: FeatureKind) -> Self {
        match k {
            FeatureKind::Words => Features::Words,
            FeatureKind::WordBigrams => Features::WordBigrams,
            FeatureKind::CharTrigrams => Features::CharTrigrams,
            FeatureKind::Prefix4 => Features::Prefix4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScorerKind {
    Bm25,
    Cosine { features: FeatureKind },
    MaxSim { features: FeatureKind },
}

/// One zoo member as written in config files:
/// `{ kind = "max_sim", features = "words", threshold = 0.8 }`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SlotRepr", into = "SlotRepr")]
pub struct ScorerSlot {
    pub kind: ScorerKind,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum KindName {
    Bm25,
    Cosine,
    MaxSim,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SlotRepr {
    kind: KindName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<FeatureKind>,
    threshold: f64,
}

impl TryFrom<SlotRepr> for ScorerSlot {
    type Error = String;

    fn try_from(r: SlotRepr) -> std::result::Result<Self, String> {
        let kind = match (r.kind, r.features) {
            (KindName::Bm25, None) => ScorerKind::Bm25,
            (KindName::Bm25, Some(_)) => return Err("bm25 takes no `features`".into()),
            (KindName::Cosine, Some(features)) => ScorerKind::Cosine { features },
            (KindName::MaxSim, Some(features)) => ScorerKind::MaxSim { features },
            (_, None) => return Err("embedding scorers need `features`".into()),
        };
        Ok(Self {
            kind,
            threshold: r.threshold,
        })
    }
}

impl From<ScorerSlot> for SlotRepr {
    fn from(s: ScorerSlot) -> Self {
        let (kind, features) = match s.kind {
            ScorerKind::Bm25 => (KindName::Bm25, None),
            ScorerKind::Cosine { features } => (KindName::Cosine, Some(features)),
            ScorerKind::MaxSim { features } => (KindName::MaxSim, Some(features)),
        };
        SlotRepr {
            kind,
            features,
            threshold: s.threshold,
        }
    }
}

/// The five-slot zoo: one lexical scorer and four embedding matchers.
pub fn default_slots() -> Vec<ScorerSlot> {
    let slot = |kind, threshold| ScorerSlot { kind, threshold };
    vec![
        slot(ScorerKind::Bm25, 4.3),
        slot(ScorerKind::MaxSim { features: FeatureKind::Words }, 0.8),
        slot(ScorerKind::MaxSim { features: FeatureKind::CharTrigrams }, 0.75),
        slot(ScorerKind::MaxSim { features: FeatureKind::Prefix4 }, 0.82),
        slot(ScorerKind::Cosine { features: FeatureKind::WordBigrams }, 0.9),
    ]
}

/// Instantiates `slots`; BM25 statistics come from `corpus`.
pub fn build_zoo<'a, I>(slots: &[ScorerSlot], corpus: I, dim: usize) -> Vec<ScorerSpec>
where
    I: IntoIterator<Item = &'a str>,
{
    let needs_bm25 = slots.iter().any(|s| s.kind == ScorerKind::Bm25);
    let bm25: Option<Arc<dyn Scorer>> = needs_bm25.then(|| Arc::new(Bm25::new(corpus)) as Arc<dyn Scorer>);
    slots
        .iter()
        .map(|s| {
            let (name, scorer): (String, Arc<dyn Scorer>) = match s.kind {
                ScorerKind::Bm25 => ("bm25".into(), bm25.clone().expect("built above")),
                ScorerKind::Cosine { features } => (
                    format!("cosine_{features:?}").to_lowercase(),
                    Arc::new(CosineScorer(HashedBagEmbedder::new(dim, features.into()))),
                ),
                ScorerKind::MaxSim { features } => (
                    format!("maxsim_{features:?}").to_lowercase(),
                    Arc::new(MaxSimScorer {
                        dim,
                        features: features.into(),
                    }),
                ),
            };
            ScorerSpec {
                name,
                threshold: s.threshold,
                scorer,
            }
        })
        .collect()
}
