//! Composite reward for preference optimization: semantic cosine similarity,
//! Gaussian length regularization, their weighted blend, and group-normalized
//! advantages.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::fnv1a;
use crate::text;

pub trait SentenceEncoder: Send + Sync {
    fn dim(&self) -> usize;
    /// Fixed-width embedding; the zero vector when `text` has no words.
    fn encode(&self, text: &str) -> Result<Vec<f64>>;
}

/// Mean of frozen per-word random vectors, L2-normalized. Each word's vector
/// is drawn from a generator seeded by the word's hash, so the table covers
/// any vocabulary without being stored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BagOfEmbeddings {
    pub dim: usize,
    pub seed: u64,
}

impl Default for BagOfEmbeddings {
    fn default() -> Self {
        BagOfEmbeddings { dim: 64, seed: 0 }
    }
}

impl BagOfEmbeddings {
    pub fn word_vector(&self, word: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(word.as_bytes()));
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

impl SentenceEncoder for BagOfEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, sentence: &str) -> Result<Vec<f64>> {
        let words = text::words(sentence);
        let mut acc = vec![0.0; self.dim];
        for w in &words {
            for (a, v) in acc.iter_mut().zip(self.word_vector(w)) {
                *a += v;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            acc.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(acc)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine similarity of the encoded candidate and reference.
pub fn semantic_reward(candidate: &str, reference: &str, encoder: &dyn SentenceEncoder) -> Result<f64> {
    if text::words(reference).is_empty() {
        return Err(Error::invalid("semantic reward needs a non-empty reference"));
    }
    if text::words(candidate).is_empty() {
        return Ok(0.0);
    }
    let (c, r) = (encoder.encode(candidate)?, encoder.encode(reference)?);
    if c.len() != r.len() {
        return Err(Error::Encoder(format!("encoder returned widths {} and {}", c.len(), r.len())));
    }
    Ok(cosine(&c, &r))
}

/// `exp(−(L − L_ref)² / 2σ²)`.
pub fn length_reward(len: f64, len_ref: f64, sigma: f64) -> f64 {
    let d = len - len_ref;
    (-(d * d) / (2.0 * sigma * sigma)).exp()
}

/// `α·s_sem + (1 − α)·s_len`.
pub fn composite(s_sem: f64, s_len: f64, alpha: f64) -> f64 {
    alpha * s_sem + (1.0 - alpha) * s_len
}

/// `A_i = (s_i − s̄) / √(var + ε)` with the population variance.
pub fn group_advantages(scores: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if scores.len() < 2 {
        return Err(Error::invalid("group advantages need at least two scores"));
    }
    let m = scores.len() as f64;
    // offset by the first score so identical scores give exactly zero
    let s0 = scores[0];
    let mean = s0 + scores.iter().map(|s| s - s0).sum::<f64>() / m;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / m;
    let denom = (var + epsilon).sqrt();
    Ok(scores.iter().map(|s| (s - mean) / denom).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub alpha: f64,
    pub sigma: f64,
    pub group_size: usize,
    pub epsilon: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            alpha: 0.95,
            sigma: 10.0,
            group_size: 8,
            epsilon: 1e-9,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid("reward alpha must lie in [0, 1]"));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::invalid("reward sigma must be positive"));
        }
        if self.group_size < 2 {
            return Err(Error::invalid("reward group_size must be at least 2"));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::invalid("reward epsilon must be non-negative"));
        }
        Ok(())
    }
}

/// Scores and advantages of one sampled group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScores {
    pub s_sem: Vec<f64>,
    pub s_len: Vec<f64>,
    pub s: Vec<f64>,
    pub advantages: Vec<f64>,
    pub mean: f64,
}

impl GroupScores {
    pub fn mean_abs_advantage(&self) -> f64 {
        self.advantages.iter().map(|a| a.abs()).sum::<f64>() / self.advantages.len() as f64
    }
}

/// Score `candidates` against `reference`; lengths are counted in words.
pub fn score_group(candidates: &[String], reference: &str, encoder: &dyn SentenceEncoder, cfg: &RewardConfig) -> Result<GroupScores> {
    let len_ref = text::words(reference).len() as f64;
    let mut s_sem = Vec::with_capacity(candidates.len());
    let mut s_len = Vec::with_capacity(candidates.len());
    for c in candidates {
        s_sem.push(semantic_reward(c, reference, encoder)?);
        s_len.push(length_reward(text::words(c).len() as f64, len_ref, cfg.sigma));
    }
    let s: Vec<f64> = s_sem.iter().zip(&s_len).map(|(&a, &b)| composite(a, b, cfg.alpha)).collect();
    let advantages = group_advantages(&s, cfg.epsilon)?;
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    Ok(GroupScores {
        s_sem,
        s_len,
        s,
        advantages,
        mean,
    })
}
