//! Instruction templates for the annotating LLM and parsers for its replies.
//!
//! Every template ends by asking for a single `Answer:` line; the parsers
//! read the last such line, so chain-of-thought text before it is ignored.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionKind {
    SelectBest,
    PairwiseCompare,
    Permutation,
    MultiClass5,
    CotGrade,
}

impl InstructionKind {
    pub const ALL: [InstructionKind; 5] = [
        InstructionKind::SelectBest,
        InstructionKind::PairwiseCompare,
        InstructionKind::Permutation,
        InstructionKind::MultiClass5,
        InstructionKind::CotGrade,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InstructionKind::SelectBest => "select_best",
            InstructionKind::PairwiseCompare => "pairwise_compare",
            InstructionKind::Permutation => "permutation",
            InstructionKind::MultiClass5 => "multi_class5",
            InstructionKind::CotGrade => "cot_grade",
        }
    }

    fn arity_ok(self, n: usize) -> bool {
        match self {
            InstructionKind::SelectBest | InstructionKind::Permutation => n >= 2,
            InstructionKind::PairwiseCompare => n == 2,
            InstructionKind::MultiClass5 | InstructionKind::CotGrade => n == 1,
        }
    }

    fn arity_text(self) -> &'static str {
        match self {
            InstructionKind::SelectBest | InstructionKind::Permutation => "at least 2",
            InstructionKind::PairwiseCompare => "exactly 2",
            InstructionKind::MultiClass5 | InstructionKind::CotGrade => "exactly 1",
        }
    }

    fn template(self) -> &'static str {
        match self {
            InstructionKind::SelectBest => SELECT_BEST,
            InstructionKind::PairwiseCompare => PAIRWISE,
            InstructionKind::Permutation => PERMUTATION,
            InstructionKind::MultiClass5 => MULTI_CLASS,
            InstructionKind::CotGrade => COT_GRADE,
        }
    }
}

const RUBRIC: &str = "0 = off-topic, 1 = slightly relevant, 2 = relevant, 3 = useful, 4 = vital";

const SELECT_BEST: &str = "You are assessing results of a news search engine.
Search query: {Q}

Candidate documents:
{D}

Select the most relevant document to the query, preferring documents about the latest event the query refers to.
Finish with one line of the form \"Answer: <document number>\".
";

const PAIRWISE: &str = "You are assessing results of a news search engine.
Search query: {Q}

{D}

Compare the strength of the relevance of the two documents to the query.
Finish with one line: \"Answer: A\" if document A is more relevant, \"Answer: B\" if document B is more relevant, or \"Answer: same\".
";

const PERMUTATION: &str = "You are assessing results of a news search engine.
Search query: {Q}

Candidate documents:
{D}

Give the permutation of the documents in descending order of relevance to the query.
Finish with one line listing every document number once, most relevant first, e.g. \"Answer: 2 > 1 > 3\".
";

const MULTI_CLASS: &str = "You are assessing results of a news search engine.
Search query: {Q}

Document:
{D}

Classify how relevant the document is to the query and the event behind it, using 5 classes:
{R}.
Finish with one line of the form \"Answer: <class>\".
";

const COT_GRADE: &str = "You are assessing results of a news search engine.
Search query: {Q}

Document:
{D}

Think about the following questions step by step before grading:
1. What is the user most likely looking for, and which recent event could the query refer to?
2. What is the document about, and when did it happen?
3. Does the document cover the same event as the query, an older event, or something unrelated?
Then grade the relevance of the document on this scale:
{R}.
Finish with one line of the form \"Answer: <grade>\".
";

/// Fills a template with the query and documents.
pub fn render_prompt(kind: InstructionKind, query: &str, docs: &[&str]) -> Result<String> {
    if !kind.arity_ok(docs.len()) {
        return Err(Error::PromptArity {
            kind: kind.name(),
            expected: kind.arity_text(),
            got: docs.len(),
        });
    }
    let d = match kind {
        InstructionKind::PairwiseCompare => {
            format!("Document A: {}\nDocument B: {}", docs[0], docs[1])
        }
        InstructionKind::MultiClass5 | InstructionKind::CotGrade => docs[0].to_string(),
        InstructionKind::SelectBest | InstructionKind::Permutation => docs
            .iter()
            .enumerate()
            .map(|(i, d)| format!("[{}] {d}", i + 1))
            .collect::<Vec<_>>()
            .join("\n"),
    };
    Ok(kind
        .template()
        .replace("{R}", RUBRIC)
        .replace("{Q}", query)
        .replace("{D}", &d))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preference {
    A,
    B,
    Same,
}

/// A parsed reply. Document indices are zero-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsedLabel {
    Best(usize),
    Pairwise(Preference),
    Permutation(Vec<usize>),
    Grade(u8),
}

fn answer_line(raw: &str) -> Option<&str> {
    raw.lines().rev().find_map(|l| {
        let t = l.trim();
        let head = t.get(..7)?;
        head.eq_ignore_ascii_case("answer:").then(|| t[7..].trim())
    })
}

fn numbers(s: &str) -> Vec<usize> {
    s.split(|c: char| !c.is_ascii_digit())
        .filter(|p| !p.is_empty())
        .filter_map(|p| p.parse().ok())
        .collect()
}

/// Parses a reply to a prompt built from `n_docs` documents.
pub fn parse_response(kind: InstructionKind, raw: &str, n_docs: usize) -> Result<ParsedLabel> {
    let fail = || Error::ParseFailure {
        kind: kind.name(),
        raw: raw.to_string(),
    };
    let ans = answer_line(raw).ok_or_else(fail)?;
    match kind {
        InstructionKind::SelectBest => match numbers(ans).as_slice() {
            [n] if (1..=n_docs).contains(n) => Ok(ParsedLabel::Best(n - 1)),
            _ => Err(fail()),
        },
        InstructionKind::PairwiseCompare => {
            let a = ans.trim_matches(|c: char| !c.is_alphanumeric()).to_ascii_lowercase();
            match a.as_str() {
                "a" => Ok(ParsedLabel::Pairwise(Preference::A)),
                "b" => Ok(ParsedLabel::Pairwise(Preference::B)),
                "same" => Ok(ParsedLabel::Pairwise(Preference::Same)),
                _ => Err(fail()),
            }
        }
        InstructionKind::Permutation => {
            let order = numbers(ans);
            let mut seen = vec![false; n_docs];
            for &n in &order {
                if n == 0 || n > n_docs || std::mem::replace(&mut seen[n - 1], true) {
                    return Err(fail());
                }
            }
            if order.len() != n_docs {
                return Err(fail());
            }
            Ok(ParsedLabel::Permutation(order.into_iter().map(|n| n - 1).collect()))
        }
        InstructionKind::MultiClass5 | InstructionKind::CotGrade => match numbers(ans).as_slice() {
            [g] if *g <= 4 && !ans.contains('.') && !ans.contains('-') => Ok(ParsedLabel::Grade(*g as u8)),
            _ => Err(fail()),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic() {
        let a = render_prompt(InstructionKind::CotGrade, "green", &["d1"]).unwrap();
        let b = render_prompt(InstructionKind::CotGrade, "green", &["d1"]).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("Search query: green\n") && a.contains("\nd1\n"));
        assert!(!a.contains("{Q}") && !a.contains("{D}") && !a.contains("{R}"));
    }

    #[test]
    fn arity_is_checked() {
        assert!(matches!(
            render_prompt(InstructionKind::PairwiseCompare, "q", &["a", "b", "c"]),
            Err(Error::PromptArity { got: 3, .. })
        ));
        assert!(render_prompt(InstructionKind::SelectBest, "q", &["a"]).is_err());
        assert!(render_prompt(InstructionKind::MultiClass5, "q", &["a", "b"]).is_err());
        assert!(render_prompt(InstructionKind::Permutation, "q", &["a", "b"]).is_ok());
    }

    #[test]
    fn parses_each_kind() {
        use InstructionKind::*;
        assert_eq!(parse_response(MultiClass5, "Answer: 3", 1).unwrap(), ParsedLabel::Grade(3));
        assert_eq!(
            parse_response(CotGrade, "Answer: 1\nthinking...\nThe doc is old.\nanswer: 2", 1).unwrap(),
            ParsedLabel::Grade(2)
        );
        assert_eq!(parse_response(SelectBest, "Answer: [2]", 3).unwrap(), ParsedLabel::Best(1));
        assert_eq!(
            parse_response(PairwiseCompare, "Answer: Same.", 2).unwrap(),
            ParsedLabel::Pairwise(Preference::Same)
        );
        assert_eq!(
            parse_response(Permutation, "Answer: 2 > 1 > 3", 3).unwrap(),
            ParsedLabel::Permutation(vec![1, 0, 2])
        );
    }

    #[test]
    fn rejects_malformed() {
        use InstructionKind::*;
        assert!(parse_response(Permutation, "Answer: 2 > 4 > 1", 3).is_err());
        assert!(parse_response(Permutation, "Answer: 2 > 2 > 1", 3).is_err());
        assert!(parse_response(Permutation, "Answer: 2 > 1", 3).is_err());
        assert!(parse_response(MultiClass5, "Answer: 5", 1).is_err());
        assert!(parse_response(MultiClass5, "Answer: 2.5", 1).is_err());
        assert!(parse_response(CotGrade, "I think it is a 3", 1).is_err());
        assert!(matches!(
            parse_response(SelectBest, "Answer: 0", 2),
            Err(Error::ParseFailure { .. })
        ));
    }
}
