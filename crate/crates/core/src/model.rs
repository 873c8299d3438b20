//! The two towers assembled into one retrieval model.
//!
//! Query and event text share `query_encoder`; documents go through their
//! own `doc_encoder` and a projection MLP to the tower width. The
//! `QueryOnly` variant drops the event pathway and projects the pooled query
//! state directly, which is the "without event" ablation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{FusedQueryEmbedding, FusionConfig, FusionTower, Provenance};
use crate::layers;
use crate::params::ParameterStore;
use crate::text::{Field, TokenSequence, Vocabulary};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryTower {
    #[default]
    Fused,
    QueryOnly,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub query_tower: QueryTower,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.fusion.validate(self.encoder.hidden_dim)
    }

    pub fn tower_dim(&self) -> usize {
        self.fusion.tower_dim
    }
}

/// Dropout seeds for one query-side forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct QuerySeeds {
    pub query: Option<u64>,
    pub event: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RetrievalModel {
    config: ModelConfig,
    vocab: Vocabulary,
    params: ParameterStore,
    query_encoder: Encoder,
    doc_encoder: Encoder,
    fusion: FusionTower,
}

impl RetrievalModel {
    /// Freshly initialised parameters drawn from `seed`.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let mut model = Self::skeleton(config, vocab)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.params = model.init_store(&mut rng)?;
        Ok(model)
    }

    /// Wraps existing parameters, checking every expected tensor is present
    /// with the right shape.
    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, params: ParameterStore) -> Result<Self> {
        let mut model = Self::skeleton(config, vocab)?;
        let template = model.init_store(&mut ChaCha8Rng::seed_from_u64(0))?;
        if template.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                template.len(),
                params.len()
            )));
        }
        for id in template.ids() {
            let name = template.name(id);
            let have = params
                .id(name)
                .map_err(|_| Error::Checkpoint(format!("missing tensor {name}")))?;
            if params.value(have).dim() != template.value(id).dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    params.value(have).dim(),
                    template.value(id).dim()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    fn skeleton(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let query_encoder = Encoder::new("query_encoder", config.encoder.clone(), vocab.len());
        let doc_encoder = Encoder::new("doc_encoder", config.encoder.clone(), vocab.len());
        let fusion = FusionTower::new(config.fusion.clone(), config.encoder.hidden_dim);
        Ok(Self {
            config,
            vocab,
            params: ParameterStore::new(),
            query_encoder,
            doc_encoder,
            fusion,
        })
    }

    fn init_store(&self, rng: &mut ChaCha8Rng) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        let c = self.config.encoder.hidden_dim;
        let hidden = self.config.fusion.mlp_hidden.unwrap_or(2 * c);
        let d_out = self.config.fusion.tower_dim;
        self.query_encoder.init(&mut store, rng)?;
        self.doc_encoder.init(&mut store, rng)?;
        layers::init_mlp(&mut store, "doc_proj", c, hidden, d_out, rng)?;
        match self.config.query_tower {
            QueryTower::Fused => self.fusion.init(&mut store, rng)?,
            QueryTower::QueryOnly => layers::init_mlp(&mut store, "query_proj", c, hidden, d_out, rng)?,
        }
        Ok(store)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn fusion(&self) -> &FusionTower {
        &self.fusion
    }

    pub fn query_encoder(&self) -> &Encoder {
        &self.query_encoder
    }

    pub fn doc_encoder(&self) -> &Encoder {
        &self.doc_encoder
    }

    pub fn tokenize(&self, text: &str, field: Field) -> TokenSequence {
        self.vocab.tokenize(text, field, &self.config.encoder.max_len)
    }

    /// Query-side embedding (`1 × tower_dim`) recorded on `tape`.
    pub fn query_forward(
        &self,
        tape: &mut Tape<'_>,
        query: &TokenSequence,
        event: Option<&TokenSequence>,
        seeds: QuerySeeds,
    ) -> Result<(Var, Provenance)> {
        let q = self.query_encoder.forward(tape, query, seeds.query)?;
        match self.config.query_tower {
            QueryTower::QueryOnly => Ok((layers::mlp(tape, q.pooled, "query_proj")?, Provenance::QueryOnly)),
            QueryTower::Fused => {
                let e = match event {
                    Some(e) => Some(self.query_encoder.forward(tape, e, seeds.event)?),
                    None => None,
                };
                self.fusion.fuse_on(tape, &q, e.as_ref())
            }
        }
    }

    /// Document embedding (`1 × tower_dim`) recorded on `tape`.
    pub fn doc_forward(&self, tape: &mut Tape<'_>, doc: &TokenSequence, seed: Option<u64>) -> Result<Var> {
        let d = self.doc_encoder.forward(tape, doc, seed)?;
        layers::mlp(tape, d.pooled, "doc_proj")
    }

    /// Inference embedding of a query and its optional expansion event.
    pub fn embed_query(&self, query: &str, event: Option<&str>) -> Result<FusedQueryEmbedding> {
        let q = self.tokenize(query, Field::Query);
        let e = event.map(|e| self.tokenize(e, Field::Event));
        let mut tape = Tape::new(&self.params);
        let (out, provenance) = self.query_forward(&mut tape, &q, e.as_ref(), QuerySeeds::default())?;
        Ok(FusedQueryEmbedding {
            vector: tape.value(out).iter().copied().collect(),
            provenance,
        })
    }

    /// Inference embedding of a document, dropout off.
    pub fn embed_document(&self, text: &str) -> Result<Vec<f64>> {
        let d = self.tokenize(text, Field::Document);
        let mut tape = Tape::new(&self.params);
        let out = self.doc_forward(&mut tape, &d, None)?;
        Ok(tape.value(out).iter().copied().collect())
    }
}
