//! Exact cosine search over document embeddings.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::RetrievalModel;
use crate::training::Doc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub doc_id: String,
    pub score: f64,
}

/// Embeddings are held as `f32`, the precision they are persisted in, so a
/// reloaded index ranks exactly like the one that was built.
#[derive(Debug, Clone, PartialEq)]
pub struct DocIndex {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    norms: Vec<f64>,
}

impl DocIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            norms: Vec::new(),
        }
    }

    /// `data` is row-major, one row of `dim` values per id.
    pub fn from_parts(dim: usize, ids: Vec<String>, data: Vec<f32>) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(Error::DimensionMismatch(format!(
                "{} ids need {} values, got {}",
                ids.len(),
                ids.len() * dim,
                data.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::DuplicateId(dup.clone()));
        }
        let norms = data
            .chunks(dim.max(1))
            .take(ids.len())
            .map(|row| row.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt())
            .collect();
        Ok(Self {
            dim,
            ids,
            data,
            norms,
        })
    }

    /// Embeds every document with dropout off.
    pub fn build(docs: &[Doc], model: &RetrievalModel) -> Result<Self> {
        let dim = model.config().tower_dim();
        let mut ids = Vec::with_capacity(docs.len());
        let mut data = Vec::with_capacity(docs.len() * dim);
        for d in docs {
            ids.push(d.id.clone());
            data.extend(model.embed_document(&d.text)?.into_iter().map(|x| x as f32));
        }
        Self::from_parts(dim, ids, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn embedding(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Top `k` by cosine, ties broken by ascending doc id. Documents with a
    /// zero embedding score 0.
    pub fn search(&self, query: &[f64], k: usize) -> Result<Vec<Hit>> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "query has width {}, index {}",
                query.len(),
                self.dim
            )));
        }
        if self.is_empty() || k == 0 {
            return Ok(Vec::new());
        }
        let qn = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        if qn == 0.0 {
            return Err(Error::ZeroNorm);
        }
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .map(|i| {
                let dot: f64 = self
                    .embedding(i)
                    .iter()
                    .zip(query)
                    .map(|(&d, q)| f64::from(d) * q)
                    .sum();
                let s = if self.norms[i] == 0.0 {
                    0.0
                } else {
                    dot / (qn * self.norms[i])
                };
                (s, i)
            })
            .collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| {
            b.0.total_cmp(&a.0).then_with(|| self.ids[a.1].cmp(&self.ids[b.1]))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);
        Ok(scored
            .into_iter()
            .map(|(score, i)| Hit {
                doc_id: self.ids[i].clone(),
                score,
            })
            .collect())
    }
}
