//! Seeded synthetic corpus with the structure of time-sensitive search.
//!
//! Query texts are ambiguous on purpose: two queries share each query word
//! but are tied to different events. Documents come in three tiers:
//!
//! * breaking news: the query word plus the tokens of that query's event,
//!   grade 4 for the query and grade 2 for its sibling;
//! * out-of-date news: the query word plus stale tokens, grade 2 for both;
//! * background: filler text, grade 0, sometimes carrying event or stale
//!   tokens as distractors.
//!
//! With the query text alone the two siblings are indistinguishable, so
//! only the event tells breaking news from the sibling's.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::llm::StubEntry;
use crate::annotation::prompt::{render_prompt, InstructionKind};
use crate::annotation::RawTriplet;
use crate::error::{Error, Result};
use crate::events::EventTitle;
use crate::metrics::JudgedPair;
use crate::training::{Dataset, Doc, Quadruplet};

/// Number of judged background documents per query.
const JUDGED_BACKGROUND: usize = 5;
const EVENT_TOKENS: usize = 3;
const FILLER_POOL: usize = 400;
const STALE_POOL: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSizes {
    pub queries: usize,
    pub events: usize,
    pub docs: usize,
}

impl Default for SynthSizes {
    fn default() -> Self {
        Self {
            queries: 200,
            events: 20,
            docs: 5000,
        }
    }
}

impl SynthSizes {
    pub fn validate(&self) -> Result<()> {
        if self.queries == 0 || self.events == 0 {
            return Err(Error::Config("synth sizes must be >= 1".into()));
        }
        if self.docs < 2 * self.queries {
            return Err(Error::Config(format!(
                "synth needs at least two documents per query ({} for {} queries), got {}",
                2 * self.queries,
                self.queries,
                self.docs
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthQuery {
    pub id: String,
    pub text: String,
    /// The event this query is expanded with.
    pub event_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthEvent {
    pub id: String,
    pub text: String,
    pub found_time: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthDoc {
    pub id: String,
    pub text: String,
    /// 1 breaking, 2 out of date, 3 background.
    pub tier: u8,
    pub published: DateTime<Utc>,
}

impl SynthDoc {
    pub fn to_doc(&self) -> Doc {
        Doc {
            id: self.id.clone(),
            text: self.text.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub queries: Vec<SynthQuery>,
    pub events: Vec<SynthEvent>,
    pub docs: Vec<SynthDoc>,
    pub judged: Vec<JudgedPair>,
    /// Noisy raw titles from which the events can be rebuilt.
    pub stream: Vec<EventTitle>,
    /// The "current time" of the corpus.
    pub now: DateTime<Utc>,
}

/// Deterministic pseudo-words, all distinct.
fn make_words(rng: &mut ChaCha8Rng, n: usize, taken: &mut HashSet<String>) -> Vec<String> {
    const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh"];
    const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syl = rng.gen_range(2..=3);
        let w: String = (0..syl)
            .map(|_| format!("{}{}", ONSETS[rng.gen_range(0..ONSETS.len())], VOWELS[rng.gen_range(0..VOWELS.len())]))
            .collect();
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &'a [String], n: usize) -> Vec<&'a str> {
    pool.choose_multiple(rng, n).map(String::as_str).collect()
}

fn doc_text(rng: &mut ChaCha8Rng, parts: Vec<&str>, filler: &[String]) -> String {
    let n_fill = rng.gen_range(5..=9);
    let mut words = parts;
    words.extend(pick(rng, filler, n_fill));
    words.shuffle(rng);
    words.join(" ")
}

const SOURCES: [&str; 4] = ["Daily", "Wire", "Herald", "Courier"];

/// Builds the corpus. Sizes are checked by [`SynthSizes::validate`].
pub fn synth_corpus(seed: u64, sizes: SynthSizes) -> Result<SynthCorpus> {
    sizes.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let now = Utc.with_ymd_and_hms(2024, 6, 1, 12, 0, 0).single().expect("valid date");
    let mut taken = HashSet::new();
    let n_words = sizes.queries.div_ceil(2);
    let query_words = make_words(&mut rng, n_words, &mut taken);
    let event_tokens = make_words(&mut rng, EVENT_TOKENS * sizes.events, &mut taken);
    let stale = make_words(&mut rng, STALE_POOL, &mut taken);
    let filler = make_words(&mut rng, FILLER_POOL, &mut taken);

    let events: Vec<SynthEvent> = (0..sizes.events)
        .map(|e| SynthEvent {
            id: format!("e{e:03}"),
            text: event_tokens[e * EVENT_TOKENS..(e + 1) * EVENT_TOKENS].join(" "),
            found_time: now - Duration::minutes(rng.gen_range(30..48 * 60)),
        })
        .collect();
    // Siblings 2w and 2w+1 share word w; consecutive ids map to different
    // events whenever there is more than one event.
    let queries: Vec<SynthQuery> = (0..sizes.queries)
        .map(|q| SynthQuery {
            id: format!("q{q:04}"),
            text: query_words[q / 2].clone(),
            event_id: events[q % sizes.events].id.clone(),
        })
        .collect();

    let per_query = if sizes.docs >= 5 * sizes.queries { 2 } else { 1 };
    let mut docs = Vec::with_capacity(sizes.docs);
    let mut breaking: Vec<Vec<usize>> = vec![Vec::new(); sizes.queries];
    let mut dated: Vec<Vec<usize>> = vec![Vec::new(); n_words];
    for (q, query) in queries.iter().enumerate() {
        let ev = q % sizes.events;
        for _ in 0..per_query {
            let mut parts = vec![query.text.as_str()];
            parts.extend(event_tokens[ev * EVENT_TOKENS..(ev + 1) * EVENT_TOKENS].iter().map(String::as_str));
            let text = doc_text(&mut rng, parts, &filler);
            breaking[q].push(docs.len());
            docs.push((text, 1u8, events[ev].found_time + Duration::minutes(rng.gen_range(0..240))));
        }
        for _ in 0..per_query {
            let mut parts = vec![query.text.as_str()];
            parts.extend(pick(&mut rng, &stale, 2));
            let text = doc_text(&mut rng, parts, &filler);
            dated[q / 2].push(docs.len());
            docs.push((text, 2u8, now - Duration::days(rng.gen_range(60..720))));
        }
    }
    while docs.len() < sizes.docs {
        let mut parts = Vec::new();
        match rng.gen_range(0..4) {
            0 => {
                let ev = rng.gen_range(0..sizes.events);
                parts.extend(event_tokens[ev * EVENT_TOKENS..(ev + 1) * EVENT_TOKENS].iter().map(String::as_str));
            }
            1 => parts.extend(pick(&mut rng, &stale, 2)),
            _ => {}
        }
        let text = doc_text(&mut rng, parts, &filler);
        docs.push((text, 3, now - Duration::days(rng.gen_range(0..720))));
    }
    // Shuffle so that doc ids carry no tier information.
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut rng);
    let mut new_pos = vec![0; docs.len()];
    for (pos, &old) in order.iter().enumerate() {
        new_pos[old] = pos;
    }
    let docs: Vec<SynthDoc> = order
        .iter()
        .enumerate()
        .map(|(pos, &old)| SynthDoc {
            id: format!("d{pos:05}"),
            text: docs[old].0.clone(),
            tier: docs[old].1,
            published: docs[old].2,
        })
        .collect();
    let background: Vec<usize> = (0..docs.len()).filter(|&i| docs[i].tier == 3).collect();

    let mut judged = Vec::new();
    for q in 0..sizes.queries {
        let sib = q ^ 1;
        let mut grades: BTreeMap<usize, u8> = BTreeMap::new();
        for &d in &breaking[q] {
            grades.insert(new_pos[d], 4);
        }
        if sib < sizes.queries {
            for &d in &breaking[sib] {
                grades.insert(new_pos[d], 2);
            }
        }
        for &d in &dated[q / 2] {
            grades.insert(new_pos[d], 2);
        }
        for &d in background.choose_multiple(&mut rng, JUDGED_BACKGROUND.min(background.len())) {
            grades.insert(d, 0);
        }
        judged.extend(grades.into_iter().map(|(d, grade)| JudgedPair {
            query_id: queries[q].id.clone(),
            doc_id: docs[d].id.clone(),
            grade,
        }));
    }

    let mut stream = Vec::new();
    for ev in &events {
        let copies = rng.gen_range(1..=6);
        for c in 0..copies {
            let src = SOURCES[rng.gen_range(0..SOURCES.len())];
            let title = match c % 3 {
                0 => ev.text.clone(),
                1 => format!("[Breaking] {} — {src}", ev.text),
                _ => format!("Update: {} | {src}", ev.text),
            };
            stream.push(EventTitle {
                title,
                source: src.to_lowercase(),
                found_time: ev.found_time + Duration::minutes(rng.gen_range(0..180)),
            });
        }
    }
    for _ in 0..events.len() / 2 + 1 {
        let noise = match rng.gen_range(0..3) {
            0 => "ok".to_string(),
            1 => format!("Sponsored: {}", pick(&mut rng, &filler, 3).join(" ")),
            _ => pick(&mut rng, &filler, 4).join(" "),
        };
        stream.push(EventTitle {
            title: noise,
            source: "misc".into(),
            found_time: now - Duration::minutes(rng.gen_range(0..72 * 60)),
        });
    }
    stream.shuffle(&mut rng);

    Ok(SynthCorpus {
        queries,
        events,
        docs,
        judged,
        stream,
        now,
    })
}

impl SynthCorpus {
    pub fn event_text(&self, event_id: &str) -> Option<&str> {
        self.events.iter().find(|e| e.id == event_id).map(|e| e.text.as_str())
    }

    pub fn corpus(&self) -> Vec<Doc> {
        self.docs.iter().map(SynthDoc::to_doc).collect()
    }

    /// One triplet per judged pair, carrying the query's event.
    pub fn raw_triplets(&self) -> Vec<RawTriplet> {
        let queries: BTreeMap<&str, &SynthQuery> = self.queries.iter().map(|q| (q.id.as_str(), q)).collect();
        let docs: BTreeMap<&str, &SynthDoc> = self.docs.iter().map(|d| (d.id.as_str(), d)).collect();
        self.judged
            .iter()
            .map(|j| {
                let q = queries[j.query_id.as_str()];
                let d = docs[j.doc_id.as_str()];
                RawTriplet {
                    query_id: q.id.clone(),
                    query: q.text.clone(),
                    event_id: q.event_id.clone(),
                    event: self.event_text(&q.event_id).unwrap_or_default().to_string(),
                    doc_id: d.id.clone(),
                    doc: d.text.clone(),
                }
            })
            .collect()
    }

    /// A simulated grader's replies for every pair the triplets can produce:
    /// query pairs get 3 when the document contains the query word and 0
    /// otherwise; event pairs get 4 when the document carries every event
    /// token and 0 otherwise.
    pub fn stub_llm_entries(&self, kind: InstructionKind) -> Result<Vec<StubEntry>> {
        let contains_all = |doc: &str, text: &str| {
            let words: HashSet<&str> = doc.split_whitespace().collect();
            text.split_whitespace().all(|w| words.contains(w))
        };
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for t in self.raw_triplets() {
            let pairs = [
                (&t.query, if contains_all(&t.doc, &t.query) { 3 } else { 0 }),
                (&t.event, if contains_all(&t.doc, &t.event) { 4 } else { 0 }),
            ];
            for (left, grade) in pairs {
                let prompt = render_prompt(kind, left, &[&t.doc])?;
                let hash = crate::annotation::llm::prompt_hash(&prompt);
                if seen.insert(hash.clone()) {
                    out.push(StubEntry {
                        prompt_sha256: hash,
                        response: format!("The document was checked against the request.\nAnswer: {grade}"),
                    });
                }
            }
        }
        Ok(out)
    }

    /// Training data read straight off the grades. Query-centric positives
    /// are query-relevant documents; their negatives alternate between
    /// documents relevant to other queries and none at all, which the
    /// trainer fills with a random corpus document. Judged background alone
    /// is too small a sample: the model memorises it.
    /// Event-centric positives are breaking documents against the other
    /// query-relevant documents.
    pub fn graded_dataset(&self, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let docs: BTreeMap<&str, &SynthDoc> = self.docs.iter().map(|d| (d.id.as_str(), d)).collect();
        let mut by_query: BTreeMap<&str, Vec<&JudgedPair>> = BTreeMap::new();
        for j in &self.judged {
            by_query.entry(j.query_id.as_str()).or_default().push(j);
        }
        let topical: Vec<&str> = self
            .judged
            .iter()
            .filter(|j| j.grade >= 2)
            .map(|j| j.doc_id.as_str())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut data = Dataset::default();
        for q in &self.queries {
            let Some(js) = by_query.get(q.id.as_str()) else { continue };
            let event = self.event_text(&q.event_id).map(str::to_string);
            let grade = |g: u8| js.iter().filter(move |j| j.grade == g).map(|j| docs[j.doc_id.as_str()].to_doc());
            let zero: Vec<Doc> = grade(0).collect();
            let two: Vec<Doc> = grade(2).collect();
            let four: Vec<Doc> = grade(4).collect();
            let own: HashSet<&str> = js.iter().filter(|j| j.grade >= 2).map(|j| j.doc_id.as_str()).collect();
            // Keyed by text: siblings are the same query issued under
            // different events, so their documents must never be mined as
            // each other's negatives.
            let quad = |positive: Doc, negative: Option<Doc>| Quadruplet {
                query_id: q.text.clone(),
                query: q.text.clone(),
                event: event.clone(),
                positive,
                negative,
            };
            for (i, p) in four.iter().chain(&two).enumerate() {
                let other = topical
                    .choose_multiple(&mut rng, 8)
                    .find(|d| !own.contains(**d))
                    .map(|d| docs[*d].to_doc());
                let neg = if i % 2 == 0 { other } else { None };
                data.query_centric.push(quad(p.clone(), neg));
            }
            for p in &four {
                let neg = if rng.gen_bool(0.8) { two.choose(&mut rng) } else { zero.choose(&mut rng) };
                data.event_centric.push(quad(p.clone(), neg.or(zero.first()).cloned()));
            }
        }
        data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthCorpus {
        synth_corpus(
            7,
            SynthSizes {
                queries: 10,
                events: 3,
                docs: 80,
            },
        )
        .unwrap()
    }

    #[test]
    fn same_seed_same_corpus() {
        assert_eq!(small(), small());
    }

    #[test]
    fn sizes_and_tiers() {
        let c = small();
        assert_eq!(c.docs.len(), 80);
        assert_eq!(c.queries.len(), 10);
        assert_eq!(c.events.len(), 3);
        let count = |t| c.docs.iter().filter(|d| d.tier == t).count();
        assert_eq!(count(1) + count(2) + count(3), 80);
        assert_eq!(count(1), 20);
    }

    #[test]
    fn every_query_has_breaking_and_dated_docs() {
        let c = small();
        for q in &c.queries {
            let g = |x| c.judged.iter().any(|j| j.query_id == q.id && j.grade == x);
            assert!(g(4) && g(2) && g(0), "{}", q.id);
        }
    }

    #[test]
    fn siblings_share_text_but_not_event() {
        let c = small();
        for pair in c.queries.chunks(2) {
            if let [a, b] = pair {
                assert_eq!(a.text, b.text);
                assert_ne!(a.event_id, b.event_id);
            }
        }
    }

    #[test]
    fn too_few_docs_is_rejected() {
        let s = SynthSizes {
            queries: 10,
            events: 2,
            docs: 19,
        };
        assert!(synth_corpus(1, s).is_err());
    }
}
