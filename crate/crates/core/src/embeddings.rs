//! Skip-gram with negative sampling over encoded notes.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::corpus::{Vocabulary, PAD};
use crate::numerics::{Checkpoint, Rng, Tensor};
use crate::{Error, Result};

const TENSOR_NAME: &str = "embeddings";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub min_count: usize,
    pub epochs: usize,
    pub negatives: usize,
    pub start_lr: f64,
    pub end_lr: f64,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        SkipGramConfig {
            dim: 300,
            window: 5,
            min_count: 10,
            epochs: 5,
            negatives: 5,
            start_lr: 0.025,
            end_lr: 0.0001,
            seed: 0,
        }
    }
}

/// Pretrained `V×d` token vectors tied to the vocabulary they index.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    vectors: Tensor,
    epochs: usize,
    fingerprint: String,
}

impl EmbeddingTable {
    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.vectors.rows()
    }

    pub fn check_vocabulary(&self, vocab: &Vocabulary) -> Result<()> {
        let found = vocab.fingerprint();
        if found != self.fingerprint || vocab.len() != self.vocab_size() {
            return Err(Error::FingerprintMismatch {
                expected: self.fingerprint.clone(),
                found,
            });
        }
        Ok(())
    }

    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut ckpt = Checkpoint::new();
        ckpt.insert(TENSOR_NAME, self.vectors.clone());
        ckpt.metadata.insert("vocab_fingerprint".into(), self.fingerprint.clone());
        ckpt.metadata.insert("epochs".into(), self.epochs.to_string());
        ckpt.write(path)
    }

    /// Loads a table and verifies it was trained against `vocab`.
    pub fn import(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Self> {
        let ckpt = Checkpoint::read(path)?;
        let vectors = ckpt.require(TENSOR_NAME)?.clone();
        if vectors.shape().len() != 2 {
            return Err(Error::Checkpoint("embedding tensor must be 2-D".into()));
        }
        let meta = |k: &str| {
            ckpt.metadata
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{k}`")))
        };
        let table = EmbeddingTable {
            vectors,
            epochs: meta("epochs")?
                .parse()
                .map_err(|_| Error::Checkpoint("bad epochs".into()))?,
            fingerprint: meta("vocab_fingerprint")?,
        };
        table.check_vocabulary(vocab)?;
        Ok(table)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Result of [`train_skipgram_with_context`]: input and output vectors.
pub struct SkipGramModel {
    pub table: EmbeddingTable,
    /// Output ("context") vectors, `V×d`.
    pub context: Tensor,
}

impl SkipGramModel {
    /// Cosine between the input vector of `word` and the context vector of
    /// `context`.
    pub fn word_context_cosine(&self, word: usize, context: usize) -> f64 {
        cosine(self.table.vectors.row(word), self.context.row(context))
    }
}

pub fn cosine_similarity(table: &EmbeddingTable, a: usize, b: usize) -> f64 {
    cosine(table.vectors.row(a), table.vectors.row(b))
}

/// Trains token vectors with skip-gram and negative sampling.
///
/// Every `(center, context)` pair within `window` positions is used (no
/// window shrinking, no frequent-word subsampling). Negatives are drawn
/// from the unigram distribution raised to 3/4. The learning rate decays
/// linearly from `start_lr` to `end_lr` over all epochs. PAD never takes
/// part in a pair and its row stays zero.
pub fn train_skipgram(corpus: &[Vec<usize>], vocab: &Vocabulary, config: &SkipGramConfig) -> Result<EmbeddingTable> {
    train_skipgram_with_context(corpus, vocab, config).map(|m| m.table)
}

pub fn train_skipgram_with_context(corpus: &[Vec<usize>], vocab: &Vocabulary, config: &SkipGramConfig) -> Result<SkipGramModel> {
    let (v, d) = (vocab.len(), config.dim);
    if d == 0 || config.window == 0 {
        return Err(Error::invalid("dim and window must be positive"));
    }
    if config.min_count != vocab.min_count() {
        return Err(Error::invalid(format!(
            "corpus vocabulary was built with min_count {}, config says {}",
            vocab.min_count(),
            config.min_count
        )));
    }
    let mut counts = vec![0u64; v];
    for seq in corpus {
        for &id in seq {
            if id >= v {
                return Err(Error::IndexOutOfRange {
                    op: "train_skipgram",
                    index: id,
                    bound: v,
                });
            }
            if id != PAD {
                counts[id] += 1;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("skip-gram corpus is empty"));
    }

    let mut rng = Rng::new(config.seed);
    let mut input = vec![0.0; v * d];
    for (id, row) in input.chunks_mut(d).enumerate() {
        if id == PAD {
            continue;
        }
        for x in row.iter_mut() {
            *x = if counts[id] > 0 {
                rng.uniform_range(-0.5 / d as f64, 0.5 / d as f64)
            } else {
                rng.normal(0.0, (1.0 / d as f64).sqrt())
            };
        }
    }
    let mut output = vec![0.0; v * d];
    let noise = WeightedIndex::new(counts.iter().map(|&c| (c as f64).powf(0.75)))
        .map_err(|e| Error::invalid(format!("negative-sampling table: {e}")))?;

    let total_steps = (config.epochs as u64 * total).max(1) as f64;
    let mut step = 0u64;
    let mut grad = vec![0.0; d];
    let mut targets = Vec::with_capacity(config.negatives + 1);
    for _ in 0..config.epochs {
        for seq in corpus {
            let words: Vec<usize> = seq.iter().copied().filter(|&i| i != PAD).collect();
            for (i, &center) in words.iter().enumerate() {
                let lr = config.start_lr - (config.start_lr - config.end_lr) * step as f64 / total_steps;
                step += 1;
                let lo = i.saturating_sub(config.window);
                let hi = (i + config.window).min(words.len() - 1);
                for j in lo..=hi {
                    if j == i {
                        continue;
                    }
                    let context = words[j];
                    targets.clear();
                    targets.push((context, 1.0));
                    for _ in 0..config.negatives {
                        let neg = noise.sample(&mut rng);
                        if neg != context {
                            targets.push((neg, 0.0));
                        }
                    }
                    grad.fill(0.0);
                    let center_vec = &mut input[center * d..(center + 1) * d];
                    for &(t, label) in &targets {
                        let out = &mut output[t * d..(t + 1) * d];
                        let dot: f64 = center_vec.iter().zip(out.iter()).map(|(a, b)| a * b).sum();
                        let g = (label - sigmoid(dot)) * lr;
                        for k in 0..d {
                            grad[k] += g * out[k];
                            out[k] += g * center_vec[k];
                        }
                    }
                    for k in 0..d {
                        center_vec[k] += grad[k];
                    }
                }
            }
        }
    }
    if !input.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite { op: "train_skipgram" });
    }
    Ok(SkipGramModel {
        table: EmbeddingTable {
            vectors: Tensor::new(vec![v, d], input)?,
            epochs: config.epochs,
            fingerprint: vocab.fingerprint(),
        },
        context: Tensor::new(vec![v, d], output)?,
    })
}
