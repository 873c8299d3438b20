//! Word-level vocabulary and tokenizer.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const SPECIALS: [&str; 4] = [PAD, UNK, CLS, SEP];

/// Which text field a sequence came from; each has its own length cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Query,
    Event,
    Document,
}

/// Per-field truncation lengths, counted in ids including `[CLS]` and `[SEP]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaxLengths {
    pub query: usize,
    pub event: usize,
    pub document: usize,
}

impl Default for MaxLengths {
    fn default() -> Self {
        Self {
            query: 24,
            event: 36,
            document: 128,
        }
    }
}

impl MaxLengths {
    pub fn get(&self, field: Field) -> usize {
        match field {
            Field::Query => self.query,
            Field::Event => self.event,
            Field::Document => self.document,
        }
    }

    pub fn longest(&self) -> usize {
        self.query.max(self.event).max(self.document)
    }
}

/// Lowercases and splits on whitespace; every punctuation or symbol
/// character becomes a token of its own.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            current.push(ch);
        } else {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;
    pub const CLS_ID: usize = 2;
    pub const SEP_ID: usize = 3;

    /// Keeps the `max_size - 4` most frequent words; ties go to the
    /// lexicographically smaller word.
    pub fn build<'a, I>(corpus: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if max_size <= SPECIALS.len() {
            return Err(Error::Config(format!(
                "vocabulary size {max_size} leaves no room beyond the {} special tokens",
                SPECIALS.len()
            )));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut docs = 0usize;
        for text in corpus {
            docs += 1;
            for w in split_words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if docs == 0 {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !SPECIALS.contains(&w.as_str()))
            .collect();
        // BTreeMap iteration is already lexicographic, so a stable sort on
        // count alone gives the tie-break.
        ranked.sort_by(|a, b| b.1.cmp(&a.1));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(w, _)| w))
            .take(max_size)
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_token_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Config("vocabulary must start with the special tokens".into()));
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.ids.len() != vocab.tokens.len() {
            return Err(Error::Config("vocabulary has duplicate tokens".into()));
        }
        Ok(vocab)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize(&self, text: &str, field: Field, max_lens: &MaxLengths) -> TokenSequence {
        let words = split_words(text);
        let cap = max_lens.get(field).max(2);
        let mut ids = Vec::with_capacity(cap.min(words.len() + 2));
        ids.push(Self::CLS_ID);
        ids.extend(
            words
                .iter()
                .take(cap - 2)
                .map(|w| self.id(w).unwrap_or(Self::UNK_ID)),
        );
        ids.push(Self::SEP_ID);
        let attention_mask = vec![1; ids.len()];
        TokenSequence {
            ids,
            attention_mask,
            original_length: words.len() + 2,
        }
    }

    /// One `token\tid` line per entry, in id order.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(w, "{t}\t{i}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R, source: &std::path::Path) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let bad = |msg: &str| Error::Format {
                path: source.to_path_buf(),
                line: n + 1,
                msg: msg.to_string(),
            };
            let (tok, id) = line.split_once('\t').ok_or_else(|| bad("expected token<TAB>id"))?;
            let id: usize = id.parse().map_err(|_| bad("id is not an integer"))?;
            if id != tokens.len() {
                return Err(bad("ids must be dense and in order"));
            }
            tokens.push(tok.to_string());
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Format {
                    path: source.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected special token {s}"),
                });
            }
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.ids.len() != vocab.tokens.len() {
            return Err(Error::Format {
                path: source.to_path_buf(),
                line: 0,
                msg: "duplicate token".into(),
            });
        }
        Ok(vocab)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
    /// Token count before truncation, including `[CLS]` and `[SEP]`.
    pub original_length: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Right-pads with `[PAD]` up to `len`.
    pub fn padded(mut self, len: usize) -> Self {
        while self.ids.len() < len {
            self.ids.push(Vocabulary::PAD_ID);
            self.attention_mask.push(0);
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_order_with_specials() {
        let v = Vocabulary::build(["a a b"], 6).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.tokens()[..4], SPECIALS.map(String::from));
        assert_eq!(v.token(4), Some("a"));
        assert_eq!(v.token(5), Some("b"));
    }

    #[test]
    fn cap_is_respected() {
        let text: Vec<String> = (0..10_000).map(|i| format!("w{i}")).collect();
        let joined = text.join(" ");
        let v = Vocabulary::build([joined.as_str()], 100).unwrap();
        assert_eq!(v.len(), 100);
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = Vocabulary::build(["zeta alpha mid", "mid"], 7).unwrap();
        assert_eq!(&v.tokens()[4..], ["mid", "alpha", "zeta"]);
    }

    #[test]
    fn deterministic_build() {
        let corpus = ["green poole conflict", "green day", "poole harbour news"];
        assert_eq!(
            Vocabulary::build(corpus, 50).unwrap(),
            Vocabulary::build(corpus, 50).unwrap()
        );
    }

    #[test]
    fn empty_corpus_is_error() {
        let none: [&str; 0] = [];
        assert!(matches!(
            Vocabulary::build(none, 10),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn empty_query_is_cls_sep() {
        let v = Vocabulary::build(["x"], 10).unwrap();
        let t = v.tokenize("", Field::Query, &MaxLengths::default());
        assert_eq!(t.ids, vec![Vocabulary::CLS_ID, Vocabulary::SEP_ID]);
        assert_eq!(t.attention_mask, vec![1, 1]);
    }

    #[test]
    fn long_document_truncated_to_128() {
        let words: Vec<String> = (0..200).map(|i| format!("w{}", i % 17)).collect();
        let text = words.join(" ");
        let v = Vocabulary::build([text.as_str()], 100).unwrap();
        let t = v.tokenize(&text, Field::Document, &MaxLengths::default());
        assert_eq!(t.len(), 128);
        assert_eq!(t.original_length, 202);
        assert_eq!(*t.ids.last().unwrap(), Vocabulary::SEP_ID);
    }

    #[test]
    fn lowercases_splits_punctuation_and_maps_unknown() {
        assert_eq!(
            split_words("Green,Poole  Conflict!"),
            vec!["green", ",", "poole", "conflict", "!"]
        );
        let v = Vocabulary::build(["green poole conflict"], 10).unwrap();
        let a = v.tokenize("Green Poole Conflict", Field::Query, &MaxLengths::default());
        let b = v.tokenize("Green Poole Conflict", Field::Query, &MaxLengths::default());
        assert_eq!(a, b);
        let c = v.tokenize("green unseen", Field::Query, &MaxLengths::default());
        assert_eq!(c.ids[2], Vocabulary::UNK_ID);
    }

    #[test]
    fn tsv_round_trip() {
        let v = Vocabulary::build(["one two two three three three"], 20).unwrap();
        let mut buf = Vec::new();
        v.write_tsv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("[PAD]\t0\n[UNK]\t1\n[CLS]\t2\n[SEP]\t3\nthree\t4\n"));
        let back = Vocabulary::read_tsv(&buf[..], std::path::Path::new("v.tsv")).unwrap();
        assert_eq!(back, v);
    }
}
