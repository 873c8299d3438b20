//! Cross-batch memory bank of positive document embeddings, mined for
//! hard negatives.

use std::collections::{HashSet, VecDeque};

use log::debug;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub doc_id: String,
    pub embedding: Vec<f64>,
    /// Query whose positive this document was.
    pub query_id: String,
    /// Position in the overall push stream.
    pub inserted: u64,
}

/// A mined negative.
#[derive(Debug, Clone, PartialEq)]
pub struct HardNegative {
    pub entry: BankEntry,
    pub similarity: f64,
    /// Rank actually taken (1-based); less than `k` when the bank was short.
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankConfig {
    /// Capacity as a multiple of the batch size.
    pub factor: usize,
    /// Which most-similar entry to take as the negative, from 1.
    pub rank: usize,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self { factor: 8, rank: 8 }
    }
}

impl BankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.factor == 0 || self.rank == 0 {
            return Err(Error::Config("bank.factor and bank.rank must be >= 1".into()));
        }
        Ok(())
    }
}

/// FIFO bank holding at most `capacity` entries; the oldest is evicted first.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    entries: VecDeque<BankEntry>,
    pushed: u64,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
            pushed: 0,
        }
    }

    /// Capacity `factor × batch_size`, e.g. the default eight batches.
    pub fn with_factor(factor: usize, batch_size: usize, dim: usize) -> Self {
        Self::new(factor * batch_size, dim)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of entries ever pushed.
    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    /// Oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &BankEntry> {
        self.entries.iter()
    }

    /// Appends in order, evicting the oldest entries past capacity. Nothing
    /// is pushed if any embedding has the wrong width.
    pub fn push_batch<I>(&mut self, positives: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, Vec<f64>, String)>,
    {
        let batch: Vec<_> = positives.into_iter().collect();
        if let Some((id, emb, _)) = batch.iter().find(|(_, e, _)| e.len() != self.dim) {
            return Err(Error::DimensionMismatch(format!(
                "bank entry {id} has width {}, expected {}",
                emb.len(),
                self.dim
            )));
        }
        for (doc_id, embedding, query_id) in batch {
            self.entries.push_back(BankEntry {
                doc_id,
                embedding,
                query_id,
                inserted: self.pushed,
            });
            self.pushed += 1;
            if self.entries.len() > self.capacity {
                self.entries.pop_front();
            }
        }
        Ok(())
    }

    /// Takes the `k`-th most similar entry that is not excluded, removing it
    /// from the bank. Entries are excluded when their doc id is in
    /// `exclude_docs` or they were pushed as a positive of `exclude_query`.
    /// Equal similarities rank older entries first. With fewer than `k`
    /// candidates the least similar one is returned instead.
    pub fn select_topk_hard(
        &mut self,
        query: &[f64],
        k: usize,
        exclude_docs: &HashSet<String>,
        exclude_query: Option<&str>,
    ) -> Result<HardNegative> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "bank query has width {}, expected {}",
                query.len(),
                self.dim
            )));
        }
        if k == 0 {
            return Err(Error::Config("hard negative rank k must be >= 1".into()));
        }
        let mut ranked: Vec<(usize, f64)> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| {
                !exclude_docs.contains(&e.doc_id) && exclude_query != Some(e.query_id.as_str())
            })
            .map(|(i, e)| (i, cosine(query, &e.embedding)))
            .collect();
        if ranked.is_empty() {
            return Err(Error::BankExhausted);
        }
        // Stable sort keeps insertion order among equal similarities.
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
        let rank = k.min(ranked.len());
        if rank < k {
            debug!("bank holds {} candidates, taking rank {rank} instead of {k}", ranked.len());
        }
        let (pos, similarity) = ranked[rank - 1];
        let entry = self.entries.remove(pos).expect("index from enumerate");
        Ok(HardNegative {
            entry,
            similarity,
            rank,
        })
    }

    /// `(doc id, similarity)` for every entry, most similar first.
    pub fn dump(&self, query: &[f64]) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = self
            .entries
            .iter()
            .map(|e| (e.doc_id.clone(), cosine(query, &e.embedding)))
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1));
        out
    }
}

/// Cosine that treats a zero vector as orthogonal to everything.
fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Uniform draw over `corpus` positions whose id is not in `exclude`.
pub fn random_negative<R: Rng, S: AsRef<str>>(
    corpus: &[S],
    rng: &mut R,
    exclude: &HashSet<String>,
) -> Result<usize> {
    let candidates: Vec<usize> = corpus
        .iter()
        .enumerate()
        .filter(|(_, id)| !exclude.contains(id.as_ref()))
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        return Err(Error::NothingToSample);
    }
    Ok(candidates[rng.gen_range(0..candidates.len())])
}
