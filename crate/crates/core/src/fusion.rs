//! Query-side tower: cross-attention between the query and its expansion
//! event, a position-wise FFN block per stream, and an MLP over the
//! concatenated streams.
//!
//! Each direction attends from the pooled `[CLS]` row of one stream over
//! every unmasked token of the other, so the cross-attention output is a
//! single `1 × C` row:
//!
//! ```text
//! CA(target <- source) = softmax(cls(target)·W_Q · (source·W_K)ᵀ / sqrt(C/h)) · source·W_V
//! ```
//!
//! computed per head and projected by `W_O`. One set of attention weights
//! serves both directions; the FFN block `LN(x + max(0, x·W1 + b1)·W2 + b2)`
//! has separate weights for the query and event streams. A missing event is
//! replaced by the query itself, which keeps the architecture unchanged.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{attend, EncodedVars, HiddenStates};
use crate::error::{Error, Result};
use crate::layers::{self, INIT_STD};
use crate::params::{Matrix, ParameterStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub num_heads: usize,
    /// Output width of both towers.
    pub tower_dim: usize,
    /// Hidden width of the FFN blocks; `None` means `2 * hidden_dim`.
    pub ffn_dim: Option<usize>,
    /// Hidden width of the output MLPs; `None` means `2 * hidden_dim`.
    pub mlp_hidden: Option<usize>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            num_heads: 4,
            tower_dim: 256,
            ffn_dim: None,
            mlp_hidden: None,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, hidden_dim: usize) -> Result<()> {
        if self.num_heads == 0 || !hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "fusion.num_heads {} must divide hidden_dim {hidden_dim}",
                self.num_heads
            )));
        }
        if self.tower_dim == 0 {
            return Err(Error::Config("fusion.tower_dim must be >= 1".into()));
        }
        if self.ffn_dim == Some(0) || self.mlp_hidden == Some(0) {
            return Err(Error::Config("fusion hidden widths must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    WithEvent,
    /// No event was available; the query stood in for it.
    Fallback,
    /// Query-only tower (no event pathway at all).
    QueryOnly,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::WithEvent => "with_event",
            Provenance::Fallback => "fallback",
            Provenance::QueryOnly => "query_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedQueryEmbedding {
    pub vector: Vec<f64>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Query,
    Event,
}

impl Stream {
    fn name(self) -> &'static str {
        match self {
            Stream::Query => "fusion.trm_query",
            Stream::Event => "fusion.trm_event",
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusionTower {
    config: FusionConfig,
    hidden_dim: usize,
}

impl FusionTower {
    pub fn new(config: FusionConfig, hidden_dim: usize) -> Self {
        Self { config, hidden_dim }
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    fn ffn_dim(&self) -> usize {
        self.config.ffn_dim.unwrap_or(2 * self.hidden_dim)
    }

    fn mlp_hidden(&self) -> usize {
        self.config.mlp_hidden.unwrap_or(2 * self.hidden_dim)
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        let c = self.hidden_dim;
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert_normal(format!("fusion.ca.{w}"), c, c, INIT_STD, rng)?;
        }
        for stream in [Stream::Query, Stream::Event] {
            let n = stream.name();
            layers::init_linear(store, &format!("{n}.fc1"), c, self.ffn_dim(), rng)?;
            layers::init_linear(store, &format!("{n}.fc2"), self.ffn_dim(), c, rng)?;
            layers::init_layer_norm(store, &format!("{n}.ln"), c)?;
        }
        layers::init_mlp(
            store,
            "fusion.mlp",
            2 * c,
            self.mlp_hidden(),
            self.config.tower_dim,
            rng,
        )
    }

    /// One `1 × C` row: the target's pooled token attending over `source`.
    pub fn cross_attention_on(
        &self,
        tape: &mut Tape<'_>,
        target_pooled: Var,
        source_states: Var,
        source_keep: &[bool],
    ) -> Result<Var> {
        let c = self.hidden_dim;
        if tape.shape(target_pooled).1 != c || tape.shape(source_states).1 != c {
            return Err(Error::DimensionMismatch(format!(
                "cross attention expects width {c}, got target {} and source {}",
                tape.shape(target_pooled).1,
                tape.shape(source_states).1
            )));
        }
        let wq = tape.param_named("fusion.ca.wq")?;
        let wk = tape.param_named("fusion.ca.wk")?;
        let wv = tape.param_named("fusion.ca.wv")?;
        let wo = tape.param_named("fusion.ca.wo")?;
        let q = tape.matmul(target_pooled, wq)?;
        let k = tape.matmul(source_states, wk)?;
        let v = tape.matmul(source_states, wv)?;
        let heads = attend(tape, q, k, v, source_keep, self.config.num_heads)?;
        tape.matmul(heads, wo)
    }

    pub fn ffn_block_on(&self, tape: &mut Tape<'_>, x: Var, stream: Stream) -> Result<Var> {
        if tape.shape(x).1 != self.hidden_dim {
            return Err(Error::DimensionMismatch("ffn block input width".into()));
        }
        let n = stream.name();
        let h = layers::linear(tape, x, &format!("{n}.fc1"))?;
        let h = tape.relu(h);
        let f = layers::linear(tape, h, &format!("{n}.fc2"))?;
        let res = tape.add(x, f)?;
        layers::layer_norm(tape, res, &format!("{n}.ln"))
    }

    /// Fused `1 × tower_dim` query embedding.
    pub fn fuse_on(
        &self,
        tape: &mut Tape<'_>,
        query: &EncodedVars,
        event: Option<&EncodedVars>,
    ) -> Result<(Var, Provenance)> {
        let (event, provenance) = match event {
            Some(e) => (e, Provenance::WithEvent),
            None => (query, Provenance::Fallback),
        };
        let ca_q = self.cross_attention_on(tape, query.pooled, event.states, &event.keep)?;
        let ca_e = self.cross_attention_on(tape, event.pooled, query.states, &query.keep)?;
        let t_q = self.ffn_block_on(tape, ca_q, Stream::Query)?;
        let t_e = self.ffn_block_on(tape, ca_e, Stream::Event)?;
        let cat = tape.concat_cols(&[t_q, t_e])?;
        Ok((layers::mlp(tape, cat, "fusion.mlp")?, provenance))
    }

    pub fn cross_attention(
        &self,
        target: &HiddenStates,
        source: &HiddenStates,
        params: &ParameterStore,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new(params);
        let t = tape.input(target.pooled.clone());
        let s = tape.input(source.states.clone());
        let keep = keep_mask(source);
        let out = self.cross_attention_on(&mut tape, t, s, &keep)?;
        Ok(tape.value(out).iter().copied().collect())
    }

    pub fn ffn_block(&self, x: &[f64], stream: Stream, params: &ParameterStore) -> Result<Vec<f64>> {
        let mut tape = Tape::new(params);
        let xv = tape.input(row(x));
        let out = self.ffn_block_on(&mut tape, xv, stream)?;
        Ok(tape.value(out).iter().copied().collect())
    }

    pub fn fuse(
        &self,
        query: &HiddenStates,
        event: Option<&HiddenStates>,
        params: &ParameterStore,
    ) -> Result<FusedQueryEmbedding> {
        let mut tape = Tape::new(params);
        let q = input_states(&mut tape, query);
        let e = event.map(|e| input_states(&mut tape, e));
        let (out, provenance) = self.fuse_on(&mut tape, &q, e.as_ref())?;
        Ok(FusedQueryEmbedding {
            vector: tape.value(out).iter().copied().collect(),
            provenance,
        })
    }
}

fn keep_mask(h: &HiddenStates) -> Vec<bool> {
    if h.mask.len() == h.states.nrows() {
        h.mask.iter().map(|&m| m == 1).collect()
    } else {
        vec![true; h.states.nrows()]
    }
}

fn input_states(tape: &mut Tape<'_>, h: &HiddenStates) -> EncodedVars {
    EncodedVars {
        states: tape.input(h.states.clone()),
        pooled: tape.input(h.pooled.clone()),
        keep: keep_mask(h),
    }
}

fn row(x: &[f64]) -> Matrix {
    Matrix::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape")
}

/// Cosine similarity, the relevance function used by every loss and by retrieval.
pub fn score(q: &[f64], d: &[f64]) -> Result<f64> {
    if q.len() != d.len() {
        return Err(Error::DimensionMismatch(format!(
            "score: {} vs {}",
            q.len(),
            d.len()
        )));
    }
    let nq = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nd = d.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nq == 0.0 || nd == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = q.iter().zip(d).map(|(a, b)| a * b).sum();
    Ok((dot / (nq * nd)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tower(c: usize, heads: usize, d_out: usize) -> (FusionTower, ParameterStore) {
        let cfg = FusionConfig {
            num_heads: heads,
            tower_dim: d_out,
            ..FusionConfig::default()
        };
        let t = FusionTower::new(cfg, c);
        let mut store = ParameterStore::new();
        t.init(&mut store, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        (t, store)
    }

    fn states(rows: Vec<Vec<f64>>) -> HiddenStates {
        let c = rows[0].len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let states = Matrix::from_shape_vec((rows.len(), c), flat).unwrap();
        HiddenStates {
            pooled: states.slice(ndarray::s![0..1, ..]).to_owned(),
            mask: vec![1; rows.len()],
            states,
        }
    }

    fn set_identity(store: &mut ParameterStore, names: &[&str]) {
        for n in names {
            let id = store.id(n).unwrap();
            let c = store.value(id).nrows();
            *store.value_mut(id) = Matrix::eye(c);
        }
    }

    #[test]
    fn identical_source_rows_return_that_row() {
        let (t, mut store) = tower(4, 2, 8);
        set_identity(&mut store, &["fusion.ca.wv", "fusion.ca.wo"]);
        let v = vec![0.3, -1.0, 2.0, 0.5];
        let target = states(vec![vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 1.0, 0.0, 1.0]]);
        let source = states(vec![v.clone(), v.clone(), v.clone()]);
        let out = t.cross_attention(&target, &source, &store).unwrap();
        for (a, b) in out.iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn singleton_source_with_identity_projections() {
        let (t, mut store) = tower(3, 1, 4);
        set_identity(
            &mut store,
            &["fusion.ca.wq", "fusion.ca.wk", "fusion.ca.wv", "fusion.ca.wo"],
        );
        let target = states(vec![vec![5.0, -2.0, 1.0]]);
        let source = states(vec![vec![0.25, 0.5, -0.75]]);
        let out = t.cross_attention(&target, &source, &store).unwrap();
        assert_eq!(out, vec![0.25, 0.5, -0.75]);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let (t, store) = tower(4, 2, 8);
        let target = states(vec![vec![1.0; 4]]);
        let source = states(vec![vec![1.0; 3]]);
        assert!(matches!(
            t.cross_attention(&target, &source, &store),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn masked_source_rows_are_ignored() {
        let (t, store) = tower(4, 2, 8);
        let target = states(vec![vec![0.1, 0.2, 0.3, 0.4]]);
        let mut source = states(vec![
            vec![1.0, 0.0, -1.0, 0.5],
            vec![0.2, 0.2, 0.2, 0.2],
            vec![9.0, 9.0, 9.0, 9.0],
        ]);
        source.mask = vec![1, 1, 0];
        let a = t.cross_attention(&target, &source, &store).unwrap();
        source.states.row_mut(2).fill(-4.0);
        let b = t.cross_attention(&target, &source, &store).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_ffn_reduces_to_layer_norm() {
        let (t, mut store) = tower(4, 2, 8);
        for n in ["fc1.w", "fc1.b", "fc2.w", "fc2.b"] {
            let id = store.id(&format!("fusion.trm_query.{n}")).unwrap();
            store.value_mut(id).fill(0.0);
        }
        let x = [1.0, 2.0, 3.0, 6.0];
        let out = t.ffn_block(&x, Stream::Query, &store).unwrap();
        let mean = 3.0;
        let var = (4.0 + 1.0 + 0.0 + 9.0) / 4.0;
        for (o, xi) in out.iter().zip(x) {
            let expected = (xi - mean) / (var + crate::layers::LN_EPS).sqrt();
            assert!((o - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_zeroes_negative_preactivations() {
        let (t, mut store) = tower(2, 1, 4);
        let b1 = store.id("fusion.trm_event.fc1.b").unwrap();
        store.value_mut(b1).fill(-100.0);
        let b2 = store.id("fusion.trm_event.fc2.b").unwrap();
        store.value_mut(b2).fill(0.0);
        let out = t.ffn_block(&[0.5, -0.5], Stream::Event, &store).unwrap();
        // FFN contributes nothing, so the output is layernorm(x) = (1, -1).
        assert!((out[0] - 1.0).abs() < 1e-4 && (out[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn fallback_equals_self_fusion_bitwise() {
        let (t, store) = tower(4, 2, 6);
        let q = states(vec![
            vec![0.1, -0.3, 0.7, 0.2],
            vec![1.1, 0.4, -0.2, 0.0],
            vec![0.5, 0.5, -0.9, 0.3],
        ]);
        let a = t.fuse(&q, None, &store).unwrap();
        let b = t.fuse(&q, Some(&q), &store).unwrap();
        assert_eq!(a.vector, b.vector);
        assert_eq!(a.provenance, Provenance::Fallback);
        assert_eq!(b.provenance, Provenance::WithEvent);
        assert_eq!(a.vector.len(), 6);
    }

    #[test]
    fn default_tower_dim_is_256() {
        let (t, store) = tower(8, 4, FusionConfig::default().tower_dim);
        let q = states(vec![vec![0.1; 8], vec![0.2; 8]]);
        assert_eq!(t.fuse(&q, None, &store).unwrap().vector.len(), 256);
    }

    #[test]
    fn cosine_scores() {
        let v = [0.3, -0.4, 1.2];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((score(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert!((score(&v, &neg).unwrap() + 1.0).abs() < 1e-15);
        let s = score(&[1.0, 0.0], &[1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt()]).unwrap();
        assert!((s - 0.707_106_781_186_547_5).abs() < 1e-9);
        assert!(matches!(score(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm)));
    }
}
