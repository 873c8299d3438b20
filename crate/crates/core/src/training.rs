//! Datasets, task sampling, the optimiser and the two training stages.

use std::collections::{BTreeMap, HashMap, HashSet};

use log::{debug, info};
use ndarray::Zip;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::bank::{random_negative, BankConfig, MemoryBank};
use crate::error::{Error, Result};
use crate::losses;
use crate::model::{QuerySeeds, RetrievalModel};
use crate::params::{Matrix, ParameterStore};
use crate::text::Field;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Doc {
    pub id: String,
    pub text: String,
}

/// One training example. `negative` may be left empty for mined negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quadruplet {
    pub query_id: String,
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<String>,
    pub positive: Doc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative: Option<Doc>,
}

impl Quadruplet {
    pub fn validate(&self) -> Result<()> {
        if self.query.trim().is_empty() || self.positive.text.trim().is_empty() {
            return Err(Error::Config(format!(
                "quadruplet for {} has an empty query or positive",
                self.query_id
            )));
        }
        if self.negative.as_ref().is_some_and(|n| n.id == self.positive.id) {
            return Err(Error::Config(format!(
                "quadruplet for {} uses {} as both positive and negative",
                self.query_id, self.positive.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Positive is query-relevant, possibly event-irrelevant.
    QueryCentric,
    /// Positive is relevant to the event; the negative is not.
    EventCentric,
}

/// Documents addressable by id, used for random and mined negatives.
#[derive(Debug, Clone, Default)]
pub struct DocPool {
    docs: Vec<Doc>,
    index: HashMap<String, usize>,
}

impl DocPool {
    /// Fails on a repeated id.
    pub fn new(docs: Vec<Doc>) -> Result<Self> {
        let mut pool = Self::default();
        for d in docs {
            if !pool.insert(d.clone()) {
                return Err(Error::DuplicateId(d.id));
            }
        }
        Ok(pool)
    }

    /// Adds `doc` unless its id is already present.
    pub fn insert(&mut self, doc: Doc) -> bool {
        if self.index.contains_key(&doc.id) {
            return false;
        }
        self.index.insert(doc.id.clone(), self.docs.len());
        self.docs.push(doc);
        true
    }

    pub fn get(&self, id: &str) -> Option<&Doc> {
        self.index.get(id).map(|&i| &self.docs[i])
    }

    pub fn docs(&self) -> &[Doc] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

/// The two training pools.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub query_centric: Vec<Quadruplet>,
    pub event_centric: Vec<Quadruplet>,
}

impl Dataset {
    pub fn get(&self, kind: TaskKind) -> &[Quadruplet] {
        match kind {
            TaskKind::QueryCentric => &self.query_centric,
            TaskKind::EventCentric => &self.event_centric,
        }
    }

    pub fn len(&self) -> usize {
        self.query_centric.len() + self.event_centric.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    /// Random until the bank has filled once, then rank-k from the bank.
    Mined,
    /// The quadruplet's own negative (random when it has none).
    Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub margin: f64,
    pub p_query_centric: f64,
    pub lambda: f64,
    pub tau: f64,
    pub learning_rate: f64,
    /// `None` means 10% of the total step count.
    pub warmup_steps: Option<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides the step count implied by `epochs`.
    pub max_steps: Option<usize>,
    pub negatives: NegativeSource,
    /// Read from the run config's own `[bank]` section.
    #[serde(skip)]
    pub bank: BankConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            p_query_centric: 0.7,
            lambda: 0.1,
            tau: 0.05,
            learning_rate: 5e-5,
            warmup_steps: None,
            batch_size: 128,
            epochs: 1,
            max_steps: None,
            negatives: NegativeSource::Mined,
            bank: BankConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("train.{m}")));
        if !(self.margin > 0.0) {
            return fail("margin must be > 0");
        }
        if !(0.0..=1.0).contains(&self.p_query_centric) {
            return fail("p_query_centric must lie in [0, 1]");
        }
        if !(self.lambda >= 0.0) {
            return fail("lambda must be >= 0");
        }
        if !(self.tau > 0.0) {
            return fail("tau must be > 0");
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be > 0");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        self.bank.validate()?;
        Ok(())
    }

    pub fn total_steps(&self, dataset_len: usize) -> usize {
        self.max_steps
            .unwrap_or_else(|| self.epochs * dataset_len.div_ceil(self.batch_size))
    }

    pub fn warmup(&self, total_steps: usize) -> usize {
        self.warmup_steps
            .unwrap_or_else(|| (total_steps as f64 * 0.1).ceil() as usize)
    }
}

/// QueryCentric with probability `p_q`.
pub fn select_task<R: Rng>(rng: &mut R, p_q: f64) -> TaskKind {
    if rng.gen::<f64>() < p_q {
        TaskKind::QueryCentric
    } else {
        TaskKind::EventCentric
    }
}

/// Linear warmup to `base`, then constant.
pub fn learning_rate_at(step: usize, base: f64, warmup: usize) -> f64 {
    if warmup == 0 || step >= warmup {
        base
    } else {
        base * (step + 1) as f64 / warmup as f64
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParameterStore) -> Self {
        let zeros: Vec<Matrix> = store
            .ids()
            .map(|id| Matrix::zeros(store.value(id).dim()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParameterStore, lr: f64) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (id, value, grad) in store.values_and_grads_mut() {
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            Zip::from(value)
                .and(grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// Per-step record for the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: u8,
    pub step: usize,
    pub task: TaskKind,
    pub batch: usize,
    pub loss: f64,
    pub triplet: f64,
    pub contrastive: f64,
    pub lr: f64,
    pub mined_negatives: usize,
    pub random_negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: u8,
    pub seed: u64,
    pub steps: Vec<StepLog>,
}

/// Mixes a run seed with step/example/role counters into one dropout seed.
pub fn mix_seed(seed: u64, step: u64, example: u64, role: u64) -> u64 {
    let mut z = seed;
    for part in [step, example, role] {
        z = splitmix(z ^ splitmix(part.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    z
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const ROLE_QUERY: u64 = 0;
const ROLE_EVENT: u64 = 1;
const ROLE_POSITIVE: u64 = 2;
const ROLE_TWIN: u64 = 3;
const ROLE_NEGATIVE: u64 = 4;

/// Cycles through a shuffled permutation, reshuffling at the end.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(len: usize) -> Self {
        Self {
            order: (0..len).collect(),
            pos: len,
        }
    }

    fn take<R: Rng>(&mut self, n: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Loss for one batch recorded on a tape, plus the bookkeeping the loop needs.
pub struct BatchForward {
    pub loss: Var,
    pub triplet: Var,
    pub contrastive: Option<Var>,
    /// `(doc id, first-view embedding, query id)` of every positive.
    pub positives: Vec<(String, Vec<f64>, String)>,
    pub mined: usize,
    pub random: usize,
}

/// Resolves negatives and records the full objective for `batch`.
#[allow(clippy::too_many_arguments)]
pub fn forward_batch(
    tape: &mut Tape<'_>,
    model: &RetrievalModel,
    batch: &[&Quadruplet],
    config: &TrainConfig,
    negatives: NegativeSource,
    bank: &mut MemoryBank,
    corpus: &DocPool,
    rng: &mut ChaCha8Rng,
    seed: u64,
    step: u64,
) -> Result<BatchForward> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let dropout = model.config().encoder.dropout > 0.0;
    let s = |i: usize, role: u64| dropout.then(|| mix_seed(seed, step, i as u64, role));

    let mut queries = Vec::with_capacity(batch.len());
    let mut pos = Vec::with_capacity(batch.len());
    let mut twins = Vec::with_capacity(batch.len());
    for (i, ex) in batch.iter().enumerate() {
        let q = model.tokenize(&ex.query, Field::Query);
        let e = ex.event.as_deref().map(|e| model.tokenize(e, Field::Event));
        let seeds = QuerySeeds {
            query: s(i, ROLE_QUERY),
            event: s(i, ROLE_EVENT),
        };
        queries.push(model.query_forward(tape, &q, e.as_ref(), seeds)?.0);
        let d = model.tokenize(&ex.positive.text, Field::Document);
        pos.push(model.doc_forward(tape, &d, s(i, ROLE_POSITIVE))?);
        twins.push(model.doc_forward(tape, &d, s(i, ROLE_TWIN))?);
    }

    let warmed = bank.pushed() >= bank.capacity() as u64;
    let corpus_ids: Vec<&str> = corpus.docs().iter().map(|d| d.id.as_str()).collect();
    let mut neg = Vec::with_capacity(batch.len());
    let (mut mined, mut random) = (0, 0);
    for (i, ex) in batch.iter().enumerate() {
        let exclude: HashSet<String> = [ex.positive.id.clone()].into();
        let mut text: Option<String> = None;
        match negatives {
            NegativeSource::Dataset => text = ex.negative.as_ref().map(|n| n.text.clone()),
            NegativeSource::Mined if warmed => {
                let qv: Vec<f64> = tape.value(queries[i]).iter().copied().collect();
                match bank.select_topk_hard(
                    &qv,
                    config.bank.rank,
                    &exclude,
                    Some(&ex.query_id),
                ) {
                    Ok(hn) => {
                        text = corpus.get(&hn.entry.doc_id).map(|d| d.text.clone());
                        mined += 1;
                    }
                    Err(Error::BankExhausted) => debug!("bank exhausted, sampling at random"),
                    Err(e) => return Err(e),
                }
            }
            NegativeSource::Mined => {}
        }
        let text = match text {
            Some(t) => t,
            None => {
                random += 1;
                let at = random_negative(&corpus_ids, rng, &exclude)?;
                corpus.docs()[at].text.clone()
            }
        };
        let d = model.tokenize(&text, Field::Document);
        neg.push(model.doc_forward(tape, &d, s(i, ROLE_NEGATIVE))?);
    }
    if negatives == NegativeSource::Dataset {
        mined = batch.len() - random;
    }

    let qm = tape.concat_rows(&queries)?;
    let pm = tape.concat_rows(&pos)?;
    let nm = tape.concat_rows(&neg)?;
    let triplet = losses::triplet_loss_on(tape, qm, pm, nm, config.margin)?;
    let (loss, contrastive) = if batch.len() >= 2 && config.lambda > 0.0 {
        let tm = tape.concat_rows(&twins)?;
        let cl = losses::contrastive_loss_on(tape, pm, tm, config.tau)?;
        (losses::total_loss_on(tape, triplet, cl, config.lambda)?, Some(cl))
    } else {
        (triplet, None)
    };
    let positives = batch
        .iter()
        .zip(&pos)
        .map(|(ex, &p)| {
            (
                ex.positive.id.clone(),
                tape.value(p).iter().copied().collect(),
                ex.query_id.clone(),
            )
        })
        .collect();
    Ok(BatchForward {
        loss,
        triplet,
        contrastive,
        positives,
        mined,
        random,
    })
}

/// Shared loop for both stages.
pub fn train(
    model: &mut RetrievalModel,
    data: &Dataset,
    corpus: &[Doc],
    config: &TrainConfig,
    negatives: NegativeSource,
    stage: u8,
    seed: u64,
) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for q in data.query_centric.iter().chain(&data.event_centric) {
        q.validate()?;
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    // Dataset documents missing from the corpus are still valid negatives.
    let mut docs = DocPool::new(corpus.to_vec())?;
    for q in data.query_centric.iter().chain(&data.event_centric) {
        for d in std::iter::once(&q.positive).chain(&q.negative) {
            docs.insert(d.clone());
        }
    }

    let total = config.total_steps(data.len());
    let warmup = config.warmup(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bank = MemoryBank::with_factor(
        config.bank.factor,
        config.batch_size,
        model.config().tower_dim(),
    );
    let mut samplers = BTreeMap::from([
        (TaskKind::QueryCentric, Sampler::new(data.query_centric.len())),
        (TaskKind::EventCentric, Sampler::new(data.event_centric.len())),
    ]);
    let mut adam = Adam::new(model.params());
    let mut logs = Vec::with_capacity(total);
    info!("stage {stage}: {total} steps, warmup {warmup}, {} examples", data.len());

    for step in 0..total {
        let mut task = select_task(&mut rng, config.p_query_centric);
        if data.get(task).is_empty() {
            task = match task {
                TaskKind::QueryCentric => TaskKind::EventCentric,
                TaskKind::EventCentric => TaskKind::QueryCentric,
            };
        }
        let pool = data.get(task);
        let picks = samplers
            .get_mut(&task)
            .expect("both tasks registered")
            .take(config.batch_size, &mut rng);
        let batch: Vec<&Quadruplet> = picks.iter().map(|&i| &pool[i]).collect();

        let (grads, record, positives) = {
            let mut tape = Tape::new(model.params());
            let fwd = forward_batch(
                &mut tape,
                model,
                &batch,
                config,
                negatives,
                &mut bank,
                &docs,
                &mut rng,
                seed,
                step as u64,
            )?;
            let lr = learning_rate_at(step, config.learning_rate, warmup);
            let record = StepLog {
                stage,
                step,
                task,
                batch: batch.len(),
                loss: tape.scalar(fwd.loss),
                triplet: tape.scalar(fwd.triplet),
                contrastive: fwd.contrastive.map_or(0.0, |c| tape.scalar(c)),
                lr,
                mined_negatives: fwd.mined,
                random_negatives: fwd.random,
            };
            (tape.backward(fwd.loss)?, record, fwd.positives)
        };
        let params = model.params_mut();
        params.zero_grad();
        params.accumulate(&grads);
        adam.step(params, record.lr);
        bank.push_batch(positives)?;
        debug!("step {step} {:?} loss {:.6}", record.task, record.loss);
        logs.push(record);
    }
    Ok(TrainReport {
        stage,
        seed,
        steps: logs,
    })
}

/// Stage 1: coarse-labelled data, negatives per `config.negatives`.
pub fn train_stage1(
    model: &mut RetrievalModel,
    data: &Dataset,
    corpus: &[Doc],
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    train(model, data, corpus, config, config.negatives, 1, seed)
}

/// A graded document for one `(query, event)` group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradedExample {
    pub query_id: String,
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<String>,
    pub task: TaskKind,
    pub doc: Doc,
    pub grade: u8,
}

/// Every pair of documents in a group with strictly different grades,
/// oriented so the positive has the higher grade.
pub fn grade_triplets(examples: &[GradedExample]) -> Dataset {
    let mut groups: BTreeMap<(TaskKind, &str, Option<&str>), Vec<&GradedExample>> =
        BTreeMap::new();
    for ex in examples {
        groups
            .entry((ex.task, ex.query_id.as_str(), ex.event.as_deref()))
            .or_default()
            .push(ex);
    }
    let mut data = Dataset::default();
    for ((task, _, _), members) in groups {
        for (i, a) in members.iter().enumerate() {
            for b in &members[i + 1..] {
                let (hi, lo) = match a.grade.cmp(&b.grade) {
                    std::cmp::Ordering::Greater => (a, b),
                    std::cmp::Ordering::Less => (b, a),
                    std::cmp::Ordering::Equal => continue,
                };
                if hi.doc.id == lo.doc.id {
                    continue;
                }
                let quad = Quadruplet {
                    query_id: hi.query_id.clone(),
                    query: hi.query.clone(),
                    event: hi.event.clone(),
                    positive: hi.doc.clone(),
                    negative: Some(lo.doc.clone()),
                };
                match task {
                    TaskKind::QueryCentric => data.query_centric.push(quad),
                    TaskKind::EventCentric => data.event_centric.push(quad),
                }
            }
        }
    }
    data
}

/// Stage 2: fine grades turned into triplets; negatives come from the
/// lower-graded document of each pair, so the bank is not used.
pub fn train_stage2(
    model: &mut RetrievalModel,
    graded: &[GradedExample],
    corpus: &[Doc],
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    let data = grade_triplets(graded);
    train(model, &data, corpus, config, NegativeSource::Dataset, 2, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::fusion::FusionConfig;
    use crate::model::{ModelConfig, QueryTower};
    use crate::text::Vocabulary;

    #[test]
    fn task_selection_boundaries_and_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..100).all(|_| select_task(&mut rng, 1.0) == TaskKind::QueryCentric));
        assert!((0..100).all(|_| select_task(&mut rng, 0.0) == TaskKind::EventCentric));
        let hits = (0..10_000)
            .filter(|_| select_task(&mut rng, 0.7) == TaskKind::QueryCentric)
            .count();
        assert!((6800..=7200).contains(&hits), "{hits}");
    }

    #[test]
    fn warmup_schedule() {
        assert_eq!(learning_rate_at(0, 1.0, 4), 0.25);
        assert_eq!(learning_rate_at(3, 1.0, 4), 1.0);
        assert_eq!(learning_rate_at(10, 1.0, 4), 1.0);
        assert_eq!(learning_rate_at(0, 1.0, 0), 1.0);
        assert_eq!(TrainConfig::default().warmup(100), 10);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParameterStore::new();
        let id = store.insert("w", Matrix::from_elem((1, 2), 1.0)).unwrap();
        let mut adam = Adam::new(&store);
        let mut tape = Tape::new(&store);
        let w = tape.param(id);
        let neg = tape.scale(w, -1.0);
        let loss = tape.sum(neg);
        let g = tape.backward(loss).unwrap();
        drop(tape);
        store.accumulate(&g);
        adam.step(&mut store, 0.1);
        for v in store.value(id) {
            assert!((v - 1.1).abs() < 1e-6);
        }
    }

    fn graded(q: &str, task: TaskKind, grades: &[(&str, u8)]) -> Vec<GradedExample> {
        grades
            .iter()
            .map(|(d, g)| GradedExample {
                query_id: q.into(),
                query: q.into(),
                event: None,
                task,
                doc: Doc {
                    id: d.to_string(),
                    text: d.to_string(),
                },
                grade: *g,
            })
            .collect()
    }

    #[test]
    fn grade_pairs() {
        let d = grade_triplets(&graded("q", TaskKind::EventCentric, &[("a", 4), ("b", 2), ("c", 0)]));
        assert_eq!(d.event_centric.len(), 3);
        assert!(d.query_centric.is_empty());
        let d = grade_triplets(&graded("q", TaskKind::QueryCentric, &[("a", 2), ("b", 2)]));
        assert!(d.is_empty());
        let d = grade_triplets(&graded("q", TaskKind::QueryCentric, &[("a", 1), ("b", 3)]));
        assert_eq!(d.query_centric[0].positive.id, "b");
    }

    fn tiny_setup() -> (RetrievalModel, Dataset, Vec<Doc>) {
        let docs: Vec<Doc> = (0..12)
            .map(|i| Doc {
                id: format!("d{i}"),
                text: format!("word{} word{} news", i % 4, i % 3),
            })
            .collect();
        let vocab = Vocabulary::build(docs.iter().map(|d| d.text.as_str()), 64).unwrap();
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                num_layers: 1,
                hidden_dim: 8,
                num_heads: 2,
                ffn_dim: 8,
                ..EncoderConfig::default()
            },
            fusion: FusionConfig {
                num_heads: 2,
                tower_dim: 8,
                ..FusionConfig::default()
            },
            query_tower: QueryTower::Fused,
        };
        let model = RetrievalModel::new(cfg, vocab, 5).unwrap();
        let quad = |q: usize, p: usize, n: usize| Quadruplet {
            query_id: format!("q{q}"),
            query: format!("word{q}"),
            event: q.is_multiple_of(2).then(|| "news".to_string()),
            positive: docs[p].clone(),
            negative: Some(docs[n].clone()),
        };
        let data = Dataset {
            query_centric: (0..6).map(|i| quad(i % 4, i, i + 6)).collect(),
            event_centric: (0..4).map(|i| quad(i, i + 2, i + 7)).collect(),
        };
        (model, data, docs)
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 3,
            max_steps: Some(6),
            learning_rate: 1e-3,
            bank: BankConfig { factor: 1, rank: 2 },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let run = |lambda: f64| {
            let (mut m, data, docs) = tiny_setup();
            let cfg = TrainConfig {
                lambda,
                ..tiny_config()
            };
            let report = train_stage1(&mut m, &data, &docs, &cfg, 9).unwrap();
            (m.params().clone(), report)
        };
        let (a, ra) = run(0.1);
        let (b, rb) = run(0.1);
        let (c, _) = run(0.0);
        assert_eq!(ra, rb);
        let values = |s: &ParameterStore| s.sorted_ids().map(|i| s.value(i).clone()).collect::<Vec<_>>();
        assert_eq!(values(&a), values(&b));
        assert_ne!(values(&a), values(&c));
        assert_eq!(ra.steps.len(), 6);
        assert!(ra.steps.iter().any(|s| s.mined_negatives > 0));
        assert!(ra.steps.iter().all(|s| s.loss.is_finite() && s.loss >= 0.0));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let (mut m, _, docs) = tiny_setup();
        assert!(matches!(
            train_stage1(&mut m, &Dataset::default(), &docs, &tiny_config(), 0),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn seeds_differ_by_role() {
        let a = mix_seed(1, 2, 3, ROLE_POSITIVE);
        let b = mix_seed(1, 2, 3, ROLE_TWIN);
        assert_ne!(a, b);
        assert_eq!(a, mix_seed(1, 2, 3, ROLE_POSITIVE));
    }
}
