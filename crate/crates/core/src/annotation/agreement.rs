//! Reducing different instruction outputs to document-pair comparisons and
//! measuring agreement between raters.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::prompt::Preference;
use crate::error::{Error, Result};

/// `relation` is 1 when `a` is better, -1 when worse, 0 when the same.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairwiseOrder {
    pub a: String,
    pub b: String,
    pub relation: i8,
}

impl PairwiseOrder {
    pub fn new(a: impl Into<String>, b: impl Into<String>, relation: i8) -> Self {
        Self {
            a: a.into(),
            b: b.into(),
            relation,
        }
    }

    pub fn swapped(&self) -> Self {
        Self::new(self.b.clone(), self.a.clone(), -self.relation)
    }
}

/// One rater's output for the documents of a single query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Annotation {
    /// Per-document grades.
    Grades(Vec<(String, u8)>),
    SelectBest { candidates: Vec<String>, winner: usize },
    /// Most relevant first.
    Permutation(Vec<String>),
    Pairwise { a: String, b: String, preference: Preference },
}

/// Every comparison the annotation implies:
/// grades compare every pair (equal grades give 0), the selected document
/// beats each other candidate, a permutation orders every earlier document
/// above every later one, and a pairwise answer maps directly.
pub fn normalize_pairwise(ann: &Annotation) -> Vec<PairwiseOrder> {
    match ann {
        Annotation::Grades(g) => {
            let mut out = Vec::new();
            for (i, (a, ga)) in g.iter().enumerate() {
                for (b, gb) in &g[i + 1..] {
                    out.push(PairwiseOrder::new(a, b, ga.cmp(gb) as i8));
                }
            }
            out
        }
        Annotation::SelectBest { candidates, winner } => candidates
            .iter()
            .enumerate()
            .filter(|(i, _)| i != winner)
            .filter_map(|(_, d)| {
                candidates
                    .get(*winner)
                    .map(|w| PairwiseOrder::new(w, d, 1))
            })
            .collect(),
        Annotation::Permutation(order) => {
            let mut out = Vec::new();
            for (i, a) in order.iter().enumerate() {
                for b in &order[i + 1..] {
                    out.push(PairwiseOrder::new(a, b, 1));
                }
            }
            out
        }
        Annotation::Pairwise { a, b, preference } => {
            let r = match preference {
                Preference::A => 1,
                Preference::B => -1,
                Preference::Same => 0,
            };
            vec![PairwiseOrder::new(a, b, r)]
        }
    }
}

/// Relation of `x` to `y` implied by `orders`, in either stored direction.
pub fn relation(orders: &[PairwiseOrder], x: &str, y: &str) -> Option<i8> {
    orders.iter().find_map(|o| {
        if o.a == x && o.b == y {
            Some(o.relation)
        } else if o.a == y && o.b == x {
            Some(-o.relation)
        } else {
            None
        }
    })
}

/// Cohen's kappa, `(p_o - p_e) / (1 - p_e)`, defined as 1 whenever the
/// raters agree on every item.
pub fn cohen_kappa<T: Ord>(a: &[T], b: &[T]) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::EmptyInput);
    }
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "rater sequences have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count();
    if agree == a.len() {
        return Ok(1.0);
    }
    let p_o = agree as f64 / n;
    let mut ma: BTreeMap<&T, usize> = BTreeMap::new();
    let mut mb: BTreeMap<&T, usize> = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        *ma.entry(x).or_default() += 1;
        *mb.entry(y).or_default() += 1;
    }
    let p_e: f64 = ma
        .iter()
        .map(|(c, &k)| k as f64 / n * mb.get(c).copied().unwrap_or(0) as f64 / n)
        .sum();
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Kappa over the document pairs both raters compared, with `reference`
/// fixing each pair's orientation.
pub fn pairwise_kappa(reference: &[PairwiseOrder], other: &[PairwiseOrder]) -> Result<f64> {
    let index: HashMap<(&str, &str), i8> = other
        .iter()
        .flat_map(|o| {
            [
                ((o.a.as_str(), o.b.as_str()), o.relation),
                ((o.b.as_str(), o.a.as_str()), -o.relation),
            ]
        })
        .collect();
    let (ra, rb): (Vec<i8>, Vec<i8>) = reference
        .iter()
        .filter_map(|r| index.get(&(r.a.as_str(), r.b.as_str())).map(|&o| (r.relation, o)))
        .unzip();
    cohen_kappa(&ra, &rb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn grades_become_orders() {
        let g = Annotation::Grades(vec![("d1".into(), 4), ("d2".into(), 2)]);
        assert_eq!(normalize_pairwise(&g), vec![PairwiseOrder::new("d1", "d2", 1)]);
        let eq = Annotation::Grades(vec![("d1".into(), 2), ("d2".into(), 2)]);
        assert_eq!(normalize_pairwise(&eq)[0].relation, 0);
    }

    #[test]
    fn permutation_orders_every_later_document() {
        let p = Annotation::Permutation(ids(&["d2", "d1", "d3"]));
        assert_eq!(
            normalize_pairwise(&p),
            vec![
                PairwiseOrder::new("d2", "d1", 1),
                PairwiseOrder::new("d2", "d3", 1),
                PairwiseOrder::new("d1", "d3", 1),
            ]
        );
    }

    #[test]
    fn select_best_only_relates_the_winner() {
        let s = Annotation::SelectBest {
            candidates: ids(&["d1", "d2", "d3"]),
            winner: 0,
        };
        let out = normalize_pairwise(&s);
        assert_eq!(
            out,
            vec![PairwiseOrder::new("d1", "d2", 1), PairwiseOrder::new("d1", "d3", 1)]
        );
        assert_eq!(relation(&out, "d2", "d3"), None);
        assert_eq!(relation(&out, "d3", "d1"), Some(-1));
    }

    #[test]
    fn pairwise_maps_directly() {
        let p = Annotation::Pairwise {
            a: "x".into(),
            b: "y".into(),
            preference: Preference::B,
        };
        assert_eq!(normalize_pairwise(&p), vec![PairwiseOrder::new("x", "y", -1)]);
    }

    #[test]
    fn kappa_cases() {
        assert_eq!(cohen_kappa(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(cohen_kappa(&[1, 1, 0, 0], &[1, 0, 0, 1]).unwrap(), 0.0);
        assert_eq!(cohen_kappa(&[7, 7], &[7, 7]).unwrap(), 1.0);
        let none: [u8; 0] = [];
        assert!(matches!(cohen_kappa(&none, &none), Err(Error::EmptyInput)));
        assert!(cohen_kappa(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn kappa_over_pairs() {
        let human = vec![PairwiseOrder::new("a", "b", 1), PairwiseOrder::new("a", "c", 0)];
        let llm = vec![PairwiseOrder::new("b", "a", -1), PairwiseOrder::new("a", "c", 0)];
        assert_eq!(pairwise_kappa(&human, &llm).unwrap(), 1.0);
    }
}
