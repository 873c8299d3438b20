//! File-level orchestration shared by the command-line tool and the
//! end-to-end tests. Every step reads its inputs from disk, writes its
//! outputs atomically and is deterministic given inputs, config and seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotation::llm::{LlmClient, StubClient};
use crate::annotation::vote::{build_zoo, VoteLabel};
use crate::annotation::{self, LabeledQuadruplet, RawTriplet, Stage};
use crate::config::RunConfig;
use crate::embed::{Features, HashedBagEmbedder};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::events::{self, EventIndex, EventTitle};
use crate::fusion::FusionConfig;
use crate::index::{DocIndex, Hit};
use crate::io::{self, Checkpoint};
use crate::metrics::{self, EvalReport, Judgments, Run};
use crate::model::{ModelConfig, QueryTower, RetrievalModel};
use crate::synth::{synth_corpus, SynthSizes};
use crate::text::Vocabulary;
use crate::training::{self, Doc, NegativeSource, StepLog, TrainConfig};

/// Embedder used to cluster titles and associate queries with events.
pub fn event_embedder(config: &RunConfig) -> HashedBagEmbedder {
    HashedBagEmbedder::new(config.event.embed_dim, Features::Words)
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    io::write_atomic(path, &bytes)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Filters, clusters and indexes a stream of titles. Returns the number of
/// events written.
pub fn events_build(stream: &Path, out_dir: &Path, config: &RunConfig) -> Result<usize> {
    let titles: Vec<EventTitle> = io::read_jsonl(stream)?;
    for (n, t) in titles.iter().enumerate() {
        t.validate().map_err(|e| Error::Format {
            path: stream.to_path_buf(),
            line: n + 1,
            msg: e.to_string(),
        })?;
    }
    let index = events::build_event_index(&titles, &config.event, &event_embedder(config))?;
    ensure_dir(out_dir)?;
    io::save_event_index(&index, out_dir, config.event.embed_dim)?;
    Ok(index.len())
}

/// File names written by [`annotate`].
#[derive(Debug, Clone)]
pub struct AnnotationPaths {
    pub query_centric: PathBuf,
    pub event_centric: PathBuf,
    pub audit: PathBuf,
    pub summary: PathBuf,
}

impl AnnotationPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            query_centric: dir.join("query_centric.jsonl"),
            event_centric: dir.join("event_centric.jsonl"),
            audit: dir.join("audit.jsonl"),
            summary: dir.join("annotation.json"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSummary {
    pub pairs: usize,
    pub easy_positive: usize,
    pub easy_negative: usize,
    pub hard: usize,
    pub unlabeled: usize,
    pub llm_requests: usize,
    pub query_centric: usize,
    pub event_centric: usize,
}

/// Labels a triplet file. Fine and full runs need `client`.
pub fn annotate(
    triplets: &Path,
    stage: Stage,
    config: &RunConfig,
    client: Option<&dyn LlmClient>,
    out_dir: &Path,
) -> Result<AnnotationSummary> {
    let raw: Vec<RawTriplet> = io::read_jsonl(triplets)?;
    if stage != Stage::Coarse && client.is_none() {
        return Err(Error::Config(
            "fine annotation needs an LLM endpoint or a stub fixture".into(),
        ));
    }
    let a = &config.annotation;
    let docs = raw.iter().map(|t| t.doc.as_str()).collect::<std::collections::BTreeSet<_>>();
    let zoo = build_zoo(&a.scorers, docs, a.embed_dim);
    let run = annotation::annotate(&raw, &zoo, a.quorum, stage, client, &a.llm)?;
    let summary = AnnotationSummary {
        pairs: run.votes.len(),
        easy_positive: run.count(VoteLabel::EasyPositive),
        easy_negative: run.count(VoteLabel::EasyNegative),
        hard: run.count(VoteLabel::Hard),
        unlabeled: run.unlabeled,
        llm_requests: run.audit.len(),
        query_centric: run.query_centric.len(),
        event_centric: run.event_centric.len(),
    };
    ensure_dir(out_dir)?;
    let paths = AnnotationPaths::in_dir(out_dir);
    io::write_jsonl(&paths.query_centric, &run.query_centric)?;
    io::write_jsonl(&paths.event_centric, &run.event_centric)?;
    io::write_jsonl(&paths.audit, &run.audit)?;
    write_json(&paths.summary, &summary)?;
    Ok(summary)
}

/// Reads a stub fixture of prompt hashes and canned replies.
pub fn stub_client(path: &Path) -> Result<StubClient> {
    let f = std::fs::File::open(path)?;
    StubClient::from_jsonl(std::io::BufReader::new(f), path)
}

/// Inputs to one training stage.
#[derive(Debug, Clone)]
pub struct TrainInputs {
    /// Labelled quadruplet files, both task kinds mixed freely.
    pub datasets: Vec<PathBuf>,
    /// Documents to draw random and mined negatives from.
    pub corpus: PathBuf,
    /// Required for stage 2; optional warm start for stage 1.
    pub init: Option<PathBuf>,
}

/// File names written by [`train`].
#[derive(Debug, Clone)]
pub struct TrainPaths {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub loss_log: PathBuf,
}

impl TrainPaths {
    pub fn in_dir(dir: &Path, stage: u8) -> Self {
        Self {
            checkpoint: dir.join(format!("stage{stage}.ckpt")),
            manifest: dir.join(format!("stage{stage}.manifest.json")),
            loss_log: dir.join(format!("stage{stage}.loss.jsonl")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub stage: u8,
    pub seed: u64,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab_size: usize,
    /// Input file name to SHA-256.
    pub inputs: BTreeMap<String, String>,
}

/// Runs one training stage and writes checkpoint, manifest and loss log.
pub fn train(inputs: &TrainInputs, stage: u8, config: &RunConfig, out_dir: &Path) -> Result<TrainPaths> {
    if !matches!(stage, 1 | 2) {
        return Err(Error::Config(format!("stage must be 1 or 2, got {stage}")));
    }
    if stage == 2 && inputs.init.is_none() {
        return Err(Error::Config("stage 2 needs an init checkpoint".into()));
    }
    let mut labeled: Vec<LabeledQuadruplet> = Vec::new();
    for p in &inputs.datasets {
        labeled.extend(io::read_jsonl::<LabeledQuadruplet>(p)?);
    }
    let corpus: Vec<Doc> = io::read_jsonl(&inputs.corpus)?;
    let tc = config.train_config();

    let mut model = match &inputs.init {
        Some(p) => {
            let (m, snap) = io::model_from_checkpoint(&Checkpoint::load(p)?)?;
            if snap.model != config.model() {
                return Err(Error::Config(format!(
                    "{} was trained with a different model config",
                    p.display()
                )));
            }
            m
        }
        None => {
            let texts = corpus
                .iter()
                .map(|d| d.text.as_str())
                .chain(labeled.iter().flat_map(|q| [q.query.as_str(), q.event.as_str()]));
            let vocab = Vocabulary::build(texts, config.encoder.vocab_size)?;
            RetrievalModel::new(config.model(), vocab, config.seed)?
        }
    };

    let report = match stage {
        1 => {
            let data = annotation::coarse_dataset(&labeled);
            training::train_stage1(&mut model, &data, &corpus, &tc, config.seed)?
        }
        _ => {
            let graded = annotation::graded_examples(&labeled);
            training::train_stage2(&mut model, &graded, &corpus, &tc, config.seed)?
        }
    };

    let mut hashes = BTreeMap::new();
    for p in inputs.datasets.iter().chain([&inputs.corpus]).chain(&inputs.init) {
        let name = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
        hashes.insert(name, sha256_file(p)?);
    }
    let manifest = TrainManifest {
        stage,
        seed: config.seed,
        steps: report.steps.len(),
        final_loss: report.steps.last().map(|s| s.loss),
        model: config.model(),
        train: tc,
        vocab_size: model.vocab().len(),
        inputs: hashes,
    };
    ensure_dir(out_dir)?;
    let paths = TrainPaths::in_dir(out_dir, stage);
    let run = serde_json::json!({ "stage": stage });
    io::model_checkpoint(&model, config.seed, run)?.save(&paths.checkpoint)?;
    write_json(&paths.manifest, &manifest)?;
    io::write_jsonl(&paths.loss_log, &report.steps)?;
    Ok(paths)
}

/// Reads the per-step loss log written by [`train`].
pub fn read_loss_log(path: &Path) -> Result<Vec<StepLog>> {
    io::read_jsonl(path)
}

/// Embeds a document file with a checkpoint's document tower.
pub fn index_build(checkpoint: &Path, docs: &Path, out: &Path) -> Result<usize> {
    let (model, _) = io::model_from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let docs: Vec<Doc> = io::read_jsonl(docs)?;
    let index = DocIndex::build(&docs, &model)?;
    if let Some(dir) = out.parent() {
        ensure_dir(dir)?;
    }
    io::save_doc_index(&index, out)?;
    Ok(index.len())
}

/// A query to search for. Extra fields in the input file are ignored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryInput {
    pub id: String,
    pub text: String,
}

/// A known query-to-event association that bypasses the event index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expansion {
    pub query_id: String,
    pub event_id: String,
    pub event: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub query_id: String,
    pub event_id: Option<String>,
    pub event: Option<String>,
    pub provenance: String,
    pub hits: Vec<Hit>,
}

/// Where search finds expansion events.
#[derive(Debug, Clone, Default)]
pub struct EventSources {
    pub index: Option<EventIndex>,
    pub expansions: BTreeMap<String, Expansion>,
}

impl EventSources {
    pub fn load(index_dir: Option<&Path>, expansions: Option<&Path>) -> Result<Self> {
        let index = index_dir.map(io::load_event_index).transpose()?;
        let expansions = match expansions {
            Some(p) => io::read_jsonl::<Expansion>(p)?
                .into_iter()
                .map(|e| (e.query_id.clone(), e))
                .collect(),
            None => BTreeMap::new(),
        };
        Ok(Self { index, expansions })
    }
}

/// Expands each query (known association first, then the event index),
/// fuses and retrieves the top `k` documents.
pub fn search(
    model: &RetrievalModel,
    index: &DocIndex,
    queries: &[QueryInput],
    sources: &EventSources,
    config: &RunConfig,
    now: DateTime<Utc>,
    k: usize,
) -> Result<Vec<SearchResult>> {
    let embedder = event_embedder(config);
    queries
        .iter()
        .map(|q| {
            let (event_id, event) = match sources.expansions.get(&q.id) {
                Some(e) => (Some(e.event_id.clone()), Some(e.event.clone())),
                None => match sources
                    .index
                    .as_ref()
                    .and_then(|ix| events::expand(&q.text, ix, &config.event, &embedder, now))
                {
                    Some(r) => (Some(r.id.clone()), Some(r.text.clone())),
                    None => (None, None),
                },
            };
            let fused = model.embed_query(&q.text, event.as_deref())?;
            Ok(SearchResult {
                query_id: q.id.clone(),
                event_id,
                event,
                provenance: fused.provenance.as_str().to_string(),
                hits: index.search(&fused.vector, k)?,
            })
        })
        .collect()
}

/// Writes search output as JSONL (with provenance) plus a run TSV.
pub fn write_search(results: &[SearchResult], jsonl: &Path, run_tsv: &Path) -> Result<()> {
    io::write_jsonl(jsonl, results)?;
    let run: BTreeMap<String, Vec<Hit>> = results
        .iter()
        .map(|r| (r.query_id.clone(), r.hits.clone()))
        .collect();
    io::write_atomic(run_tsv, &io::run_bytes(&run))
}

/// Scores a run TSV against a judgments TSV.
pub fn eval(run: &Path, judgments: &Path, config: &RunConfig) -> Result<EvalReport> {
    let run = io::read_run(run)?;
    let judged = Judgments::new(&io::read_judgments(judgments)?);
    metrics::evaluate(&run, &judged, &config.eval)
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    write_json(path, report)
}

/// File names written by [`synth`].
#[derive(Debug, Clone)]
pub struct SynthPaths {
    pub queries: PathBuf,
    pub events: PathBuf,
    pub docs: PathBuf,
    pub judgments: PathBuf,
    pub stream: PathBuf,
    pub triplets: PathBuf,
    pub llm_stub: PathBuf,
    pub expansions: PathBuf,
    pub meta: PathBuf,
}

impl SynthPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            queries: dir.join("queries.jsonl"),
            events: dir.join("events.jsonl"),
            docs: dir.join("docs.jsonl"),
            judgments: dir.join("judgments.tsv"),
            stream: dir.join("stream.jsonl"),
            triplets: dir.join("triplets.jsonl"),
            llm_stub: dir.join("llm_stub.jsonl"),
            expansions: dir.join("expansions.jsonl"),
            meta: dir.join("synth.json"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub seed: u64,
    pub sizes: SynthSizes,
    /// Reference time for event recency.
    pub now: DateTime<Utc>,
}

/// Generates the synthetic corpus and every file the pipeline consumes.
pub fn synth(seed: u64, sizes: SynthSizes, config: &RunConfig, out_dir: &Path) -> Result<SynthPaths> {
    let c = synth_corpus(seed, sizes)?;
    ensure_dir(out_dir)?;
    let p = SynthPaths::in_dir(out_dir);
    io::write_jsonl(&p.queries, &c.queries)?;
    io::write_jsonl(&p.events, &c.events)?;
    io::write_jsonl(&p.docs, &c.corpus())?;
    io::write_atomic(&p.judgments, &io::judgments_bytes(&c.judged))?;
    io::write_jsonl(&p.stream, &c.stream)?;
    io::write_jsonl(&p.triplets, &c.raw_triplets())?;
    io::write_jsonl(&p.llm_stub, &c.stub_llm_entries(config.annotation.llm.instruction)?)?;
    let expansions: Vec<Expansion> = c
        .queries
        .iter()
        .map(|q| Expansion {
            query_id: q.id.clone(),
            event_id: q.event_id.clone(),
            event: c.event_text(&q.event_id).unwrap_or_default().to_string(),
        })
        .collect();
    io::write_jsonl(&p.expansions, &expansions)?;
    write_json(&p.meta, &SynthMeta { seed, sizes, now: c.now })?;
    Ok(p)
}

/// Everything one end-to-end run produced.
#[derive(Debug, Clone)]
pub struct PipelineOutputs {
    pub synth: SynthPaths,
    pub annotation: AnnotationSummary,
    pub stage1: TrainPaths,
    pub stage2: TrainPaths,
    pub index: PathBuf,
    pub run: PathBuf,
    pub report: PathBuf,
    pub metrics: EvalReport,
}

/// synth → events → annotate (stub) → stage 1 → stage 2 → index → search → eval.
pub fn run_pipeline(config: &RunConfig, dir: &Path) -> Result<PipelineOutputs> {
    let synth_paths = synth(config.seed, config.synth, config, &dir.join("data"))?;
    let events_dir = dir.join("events");
    events_build(&synth_paths.stream, &events_dir, config)?;
    let stub = stub_client(&synth_paths.llm_stub)?;
    let ann_dir = dir.join("annotation");
    let annotation = annotate(&synth_paths.triplets, Stage::All, config, Some(&stub), &ann_dir)?;
    let ann = AnnotationPaths::in_dir(&ann_dir);
    let datasets = vec![ann.query_centric.clone(), ann.event_centric.clone()];

    let model_dir = dir.join("model");
    let stage1 = train(
        &TrainInputs {
            datasets: datasets.clone(),
            corpus: synth_paths.docs.clone(),
            init: None,
        },
        1,
        config,
        &model_dir,
    )?;
    let stage2 = train(
        &TrainInputs {
            datasets,
            corpus: synth_paths.docs.clone(),
            init: Some(stage1.checkpoint.clone()),
        },
        2,
        config,
        &model_dir,
    )?;

    let index = dir.join("index").join("docs.ckpt");
    index_build(&stage2.checkpoint, &synth_paths.docs, &index)?;
    let (model, _) = io::model_from_checkpoint(&Checkpoint::load(&stage2.checkpoint)?)?;
    let doc_index = io::load_doc_index(&index)?;
    let queries: Vec<QueryInput> = io::read_jsonl(&synth_paths.queries)?;
    let sources = EventSources::load(Some(&events_dir), Some(&synth_paths.expansions))?;
    let meta: SynthMeta = serde_json::from_slice(&std::fs::read(&synth_paths.meta)?)?;
    let results = search(&model, &doc_index, &queries, &sources, config, meta.now, config.eval.k)?;
    let search_dir = dir.join("search");
    ensure_dir(&search_dir)?;
    let run = search_dir.join("run.tsv");
    write_search(&results, &search_dir.join("results.jsonl"), &run)?;
    let metrics = eval(&run, &synth_paths.judgments, config)?;
    let report = dir.join("report.json");
    write_report(&metrics, &report)?;
    Ok(PipelineOutputs {
        synth: synth_paths,
        annotation,
        stage1,
        stage2,
        index,
        run,
        report,
        metrics,
    })
}

/// The model and training settings of the event ablation. The towers are
/// trained from scratch, which needs dropout off and the dataset's own
/// negatives to learn anything at this scale.
pub fn ablation_config(tower: QueryTower) -> (ModelConfig, TrainConfig) {
    let model = ModelConfig {
        encoder: EncoderConfig {
            num_layers: 1,
            hidden_dim: 64,
            num_heads: 2,
            ffn_dim: 128,
            dropout: 0.0,
            ..EncoderConfig::default()
        },
        fusion: FusionConfig {
            num_heads: 2,
            tower_dim: 64,
            ..FusionConfig::default()
        },
        query_tower: tower,
    };
    let train = TrainConfig {
        batch_size: 32,
        max_steps: Some(2000),
        learning_rate: 3e-4,
        lambda: 0.1,
        negatives: NegativeSource::Dataset,
        ..TrainConfig::default()
    };
    (model, train)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationScores {
    /// Reciprocal rank of the first event-relevant document.
    pub mrr: f64,
    /// Recall@10 over relevant documents.
    pub recall_at_10: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationSeed {
    pub seed: u64,
    pub with_event: AblationScores,
    pub without_event: AblationScores,
}

impl AblationSeed {
    pub fn event_helps(&self) -> bool {
        self.with_event.mrr > self.without_event.mrr
            && self.with_event.recall_at_10 >= self.without_event.recall_at_10
    }
}

/// Trains the fused and the query-only model on one synthetic corpus with
/// identical budgets and scores both. Queries are expanded with their
/// generating event.
pub fn ablation_seed(seed: u64, sizes: SynthSizes, max_steps: Option<usize>) -> Result<AblationSeed> {
    let corpus = synth_corpus(seed, sizes)?;
    let docs = corpus.corpus();
    let data = corpus.graded_dataset(seed);
    let texts = docs
        .iter()
        .map(|d| d.text.as_str())
        .chain(corpus.events.iter().map(|e| e.text.as_str()));
    let vocab = Vocabulary::build(texts, 4096)?;
    let judged = Judgments::new(&corpus.judged);
    let score = |tower: QueryTower| -> Result<AblationScores> {
        let (mc, mut tc) = ablation_config(tower);
        if max_steps.is_some() {
            tc.max_steps = max_steps;
        }
        let mut model = RetrievalModel::new(mc, vocab.clone(), seed)?;
        training::train_stage1(&mut model, &data, &docs, &tc, seed)?;
        let index = DocIndex::build(&docs, &model)?;
        let mut run: Run = BTreeMap::new();
        for q in &corpus.queries {
            let e = model.embed_query(&q.text, corpus.event_text(&q.event_id))?;
            let ids = index.search(&e.vector, 50)?.into_iter().map(|h| h.doc_id).collect();
            run.insert(q.id.clone(), ids);
        }
        Ok(AblationScores {
            mrr: metrics::mrr(&run, &judged, &metrics::event_relevant),
            recall_at_10: metrics::recall_at_k(&run, &judged, 10, &metrics::relevant)?,
        })
    };
    Ok(AblationSeed {
        seed,
        with_event: score(QueryTower::Fused)?,
        without_event: score(QueryTower::QueryOnly)?,
    })
}
