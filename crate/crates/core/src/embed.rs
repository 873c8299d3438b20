//! Lightweight deterministic text embeddings used where no trained model is
//! involved: scorer voting and event clustering.

use crate::text::split_words;

pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// 64-bit FNV-1a, chosen because its output is fixed across platforms and
/// toolchains (unlike `std`'s hasher).
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Pseudo-random ±1 unit vector for a feature string.
pub fn feature_vector(feature: &str, dim: usize) -> Vec<f64> {
    let scale = 1.0 / (dim as f64).sqrt();
    let mut out = Vec::with_capacity(dim);
    let mut state = fnv1a(feature.as_bytes());
    for i in 0..dim {
        if i % 64 == 0 {
            state = fnv1a(&state.to_le_bytes());
        }
        out.push(if (state >> (i % 64)) & 1 == 1 { scale } else { -scale });
    }
    out
}

/// How a text is cut into features before hashing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Features {
    Words,
    /// Words plus adjacent word pairs.
    WordBigrams,
    /// Character trigrams of each padded word.
    CharTrigrams,
    /// Word prefixes of at most four characters, a crude stemmer.
    Prefix4,
}

impl Features {
    pub fn extract(self, text: &str) -> Vec<String> {
        let words = split_words(text);
        match self {
            Features::Words => words,
            Features::WordBigrams => {
                let mut f = words.clone();
                f.extend(words.windows(2).map(|w| format!("{} {}", w[0], w[1])));
                f
            }
            Features::CharTrigrams => words.iter().flat_map(|w| trigrams(w)).collect(),
            Features::Prefix4 => words.iter().map(|w| w.chars().take(4).collect()).collect(),
        }
    }
}

fn trigrams(word: &str) -> Vec<String> {
    let chars: Vec<char> = format!("#{word}#").chars().collect();
    if chars.len() < 3 {
        return vec![chars.iter().collect()];
    }
    chars.windows(3).map(|w| w.iter().collect()).collect()
}

/// Sum of hashed feature vectors.
#[derive(Debug, Clone)]
pub struct HashedBagEmbedder {
    pub dim: usize,
    pub features: Features,
}

impl HashedBagEmbedder {
    pub fn new(dim: usize, features: Features) -> Self {
        Self { dim, features }
    }
}

impl TextEmbedder for HashedBagEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for f in self.features.extract(text) {
            for (o, v) in out.iter_mut().zip(feature_vector(&f, self.dim)) {
                *o += v;
            }
        }
        out
    }
}

/// Cosine with zero vectors mapped to 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
