//! On-disk formats: the binary checkpoint, JSONL records and TSV runs and
//! judgments. Every writer goes through [`write_atomic`].

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{EventIndex, EventRecord};
use crate::index::{DocIndex, Hit};
use crate::metrics::{JudgedPair, Run};
use crate::model::{ModelConfig, RetrievalModel};
use crate::params::ParameterStore;
use crate::text::Vocabulary;

pub const MAGIC: &[u8; 4] = b"ERR1";
pub const FORMAT_VERSION: u32 = 1;

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn from_matrix(m: &Array2<f64>) -> Self {
        Self {
            shape: m.shape().to_vec(),
            data: m.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        let [r, c] = self.shape[..] else {
            return Err(Error::Checkpoint(format!("expected a 2-d tensor, got shape {:?}", self.shape)));
        };
        Array2::from_shape_vec((r, c), self.data.iter().map(|&v| f64::from(v)).collect())
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// Named `f32` tensors plus the seed and a JSON config snapshot.
///
/// Layout, all integers little-endian: magic `ERR1`, `u32` version, `u64`
/// seed, `u32` config length and UTF-8 config, `u32` tensor count, then per
/// tensor a `u16` name length, the name, a `u8` rank, one `u32` per dim and
/// a `u64` byte offset into the payload; finally a `u64` payload length and
/// the payload. Tensors are stored in name order, back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub config: String,
    pub tensors: BTreeMap<String, Tensor>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} {n} does not fit in 32 bits")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&to_u32(self.config.len(), "config length")?.to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&to_u32(self.tensors.len(), "tensor count")?.to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let n: usize = t.shape.iter().product();
            if n != t.data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?} but {} values",
                    t.shape,
                    t.data.len()
                )));
            }
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Checkpoint(format!("tensor name {name} is too long")))?;
            let rank = u8::try_from(t.shape.len())
                .map_err(|_| Error::Checkpoint(format!("tensor {name} has too many dims")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rank);
            for &d in &t.shape {
                out.extend_from_slice(&to_u32(d, "dim")?.to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * n as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let seed = r.u64()?;
        let clen = r.u32()? as usize;
        let config = std::str::from_utf8(r.take(clen)?)
            .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?
            .to_string();
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            manifest.push((name, shape, offset));
        }
        let plen = r.u64()?;
        let payload = r.take(usize::try_from(plen).map_err(|_| Error::Checkpoint("payload too large".into()))?)?;
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        let mut spans: Vec<(u64, u64, &str)> = Vec::new();
        let mut tensors = BTreeMap::new();
        for (name, shape, offset) in &manifest {
            let n = shape
                .iter()
                .try_fold(1u64, |a, &d| a.checked_mul(d as u64))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
            let end = offset
                .checked_add(n)
                .filter(|&e| e <= plen)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} lies outside the payload")))?;
            spans.push((*offset, end, name));
            let bytes = &payload[*offset as usize..end as usize];
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect();
            let t = Tensor {
                shape: shape.clone(),
                data,
            };
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("tensor {name} appears twice")));
            }
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::Checkpoint(format!("tensors {} and {} overlap", w[0].2, w[1].2)));
            }
        }
        Ok(Self { seed, config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

/// What a model checkpoint's config snapshot holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSnapshot {
    pub model: ModelConfig,
    pub vocab: Vec<String>,
    /// Caller-defined run metadata, such as the full run config.
    #[serde(default)]
    pub run: serde_json::Value,
}

pub fn model_checkpoint(model: &RetrievalModel, seed: u64, run: serde_json::Value) -> Result<Checkpoint> {
    let snap = ModelSnapshot {
        model: model.config().clone(),
        vocab: model.vocab().tokens().to_vec(),
        run,
    };
    let store = model.params();
    let tensors = store
        .sorted_ids()
        .map(|id| (store.name(id).to_string(), Tensor::from_matrix(store.value(id))))
        .collect();
    Ok(Checkpoint {
        seed,
        config: serde_json::to_string(&snap)?,
        tensors,
    })
}

pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(RetrievalModel, ModelSnapshot)> {
    let snap: ModelSnapshot = serde_json::from_str(&ckpt.config)
        .map_err(|e| Error::Checkpoint(format!("config snapshot: {e}")))?;
    let vocab = Vocabulary::from_token_list(snap.vocab.clone())?;
    let mut store = ParameterStore::new();
    for (name, t) in &ckpt.tensors {
        store.insert(name.clone(), t.to_matrix()?)?;
    }
    let model = RetrievalModel::from_parts(snap.model.clone(), vocab, store)?;
    Ok((model, snap))
}

fn format_err(path: &Path, line: usize, msg: impl ToString) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    }
}

/// One JSON value per line; blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| format_err(path, 0, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format_err(path, n + 1, e))?);
    }
    Ok(out)
}

pub fn jsonl_bytes<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_atomic(path, &jsonl_bytes(items)?)
}

fn tsv_lines(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let f = fs::File::open(path).map_err(|e| format_err(path, 0, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        out.push((n + 1, line.split('\t').map(str::to_string).collect()));
    }
    Ok(out)
}

/// `query_id<TAB>doc_id<TAB>grade`, grades 0 to 4.
pub fn read_judgments(path: &Path) -> Result<Vec<JudgedPair>> {
    tsv_lines(path)?
        .into_iter()
        .map(|(n, f)| match &f[..] {
            [q, d, g] => {
                let grade: u8 = g.parse().map_err(|_| format_err(path, n, "grade is not an integer"))?;
                if grade > 4 {
                    return Err(format_err(path, n, "grade must be between 0 and 4"));
                }
                if q.is_empty() || d.is_empty() {
                    return Err(format_err(path, n, "empty id"));
                }
                Ok(JudgedPair {
                    query_id: q.clone(),
                    doc_id: d.clone(),
                    grade,
                })
            }
            _ => Err(format_err(path, n, "expected query_id<TAB>doc_id<TAB>grade")),
        })
        .collect()
}

pub fn judgments_bytes(pairs: &[JudgedPair]) -> Vec<u8> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&format!("{}\t{}\t{}\n", p.query_id, p.doc_id, p.grade));
    }
    out.into_bytes()
}

/// `query_id<TAB>doc_id<TAB>rank<TAB>score`, ranks from 1.
pub fn run_bytes(run: &BTreeMap<String, Vec<Hit>>) -> Vec<u8> {
    let mut out = String::new();
    for (q, hits) in run {
        for (i, h) in hits.iter().enumerate() {
            out.push_str(&format!("{q}\t{}\t{}\t{}\n", h.doc_id, i + 1, h.score));
        }
    }
    out.into_bytes()
}

pub fn read_run(path: &Path) -> Result<Run> {
    let mut ranked: BTreeMap<String, Vec<(usize, String)>> = BTreeMap::new();
    for (n, f) in tsv_lines(path)? {
        let [q, d, rank, score] = &f[..] else {
            return Err(format_err(path, n, "expected query_id<TAB>doc_id<TAB>rank<TAB>score"));
        };
        let rank: usize = rank.parse().map_err(|_| format_err(path, n, "rank is not an integer"))?;
        score
            .parse::<f64>()
            .map_err(|_| format_err(path, n, "score is not a number"))?;
        ranked.entry(q.clone()).or_default().push((rank, d.clone()));
    }
    Ok(ranked
        .into_iter()
        .map(|(q, mut v)| {
            v.sort();
            (q, v.into_iter().map(|(_, d)| d).collect())
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexMeta {
    kind: String,
    ids: Vec<String>,
}

const EMBEDDINGS: &str = "embeddings";

pub fn save_doc_index(index: &DocIndex, path: &Path) -> Result<()> {
    let meta = IndexMeta {
        kind: "documents".into(),
        ids: index.ids().to_vec(),
    };
    let mut tensors = BTreeMap::new();
    tensors.insert(
        EMBEDDINGS.to_string(),
        Tensor {
            shape: vec![index.len(), index.dim()],
            data: index.data().to_vec(),
        },
    );
    Checkpoint {
        seed: 0,
        config: serde_json::to_string(&meta)?,
        tensors,
    }
    .save(path)
}

fn embeddings_of(ckpt: &Checkpoint) -> Result<&Tensor> {
    let t = ckpt
        .tensors
        .get(EMBEDDINGS)
        .ok_or_else(|| Error::Checkpoint("missing embeddings tensor".into()))?;
    if t.shape.len() != 2 {
        return Err(Error::Checkpoint("embeddings must be 2-d".into()));
    }
    Ok(t)
}

pub fn load_doc_index(path: &Path) -> Result<DocIndex> {
    let ckpt = Checkpoint::load(path)?;
    let meta: IndexMeta =
        serde_json::from_str(&ckpt.config).map_err(|e| Error::Checkpoint(format!("index metadata: {e}")))?;
    let t = embeddings_of(&ckpt)?;
    if meta.kind != "documents" || t.shape[0] != meta.ids.len() {
        return Err(Error::Checkpoint(format!("{} is not a document index", path.display())));
    }
    DocIndex::from_parts(t.shape[1], meta.ids, t.data.clone())
}

/// File names of a saved event index inside its directory.
pub struct EventIndexPaths {
    pub records: PathBuf,
    pub embeddings: PathBuf,
}

impl EventIndexPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            records: dir.join("events.jsonl"),
            embeddings: dir.join("events.ckpt"),
        }
    }
}

/// Records go to JSONL and their embeddings to a checkpoint blob.
pub fn save_event_index(index: &EventIndex, dir: &Path, embed_dim: usize) -> Result<()> {
    let paths = EventIndexPaths::in_dir(dir);
    write_jsonl(&paths.records, &index.records)?;
    let meta = IndexMeta {
        kind: "events".into(),
        ids: index.records.iter().map(|r| r.id.clone()).collect(),
    };
    let data = index
        .records
        .iter()
        .flat_map(|r| r.embedding.iter().map(|&v| v as f32))
        .collect();
    let mut tensors = BTreeMap::new();
    tensors.insert(
        EMBEDDINGS.to_string(),
        Tensor {
            shape: vec![index.len(), embed_dim],
            data,
        },
    );
    Checkpoint {
        seed: 0,
        config: serde_json::to_string(&meta)?,
        tensors,
    }
    .save(&paths.embeddings)
}

pub fn load_event_index(dir: &Path) -> Result<EventIndex> {
    let paths = EventIndexPaths::in_dir(dir);
    let mut records: Vec<EventRecord> = read_jsonl(&paths.records)?;
    let ckpt = Checkpoint::load(&paths.embeddings)?;
    let meta: IndexMeta =
        serde_json::from_str(&ckpt.config).map_err(|e| Error::Checkpoint(format!("event metadata: {e}")))?;
    let t = embeddings_of(&ckpt)?;
    let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    if meta.kind != "events" || meta.ids != ids || t.shape[0] != records.len() {
        return Err(Error::Checkpoint(format!(
            "{} does not match {}",
            paths.embeddings.display(),
            paths.records.display()
        )));
    }
    let dim = t.shape[1];
    for (i, r) in records.iter_mut().enumerate() {
        r.embedding = t.data[i * dim..(i + 1) * dim].iter().map(|&v| f64::from(v)).collect();
    }
    EventIndex::new(records)
}
