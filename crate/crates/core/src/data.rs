//! Synthetic multi-speaker corpora.
//!
//! Each speaker is a small frozen teacher: tokens are embedded through a
//! table shared by all speakers, mixed with the previous token and the
//! sequence mean, and mapped to mel frames by a speaker-specific linear map
//! followed by `tanh`. The auxiliary target is a speaker-specific projection
//! of the same features. Speakers differ only along a few shared directions
//! (`speaker_factors`), so an unseen speaker is close to the span of the
//! pretraining speakers, as voices are.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::mix;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub pretrain_speakers: usize,
    pub samples_per_speaker: usize,
    /// Held-out sequences per pretraining speaker.
    pub eval_per_speaker: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub support_size: usize,
    pub eval_size: usize,
    /// Width of the teacher's token features.
    pub teacher_dim: usize,
    /// Number of shared directions along which speakers vary.
    pub speaker_factors: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            pretrain_speakers: 20,
            samples_per_speaker: 32,
            eval_per_speaker: 4,
            min_len: 8,
            max_len: 32,
            support_size: 8,
            eval_size: 16,
            teacher_dim: 8,
            speaker_factors: 4,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pretrain_speakers < 2 {
            return Err(Error::Config("pretrain_speakers must be at least 2".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "invalid length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if self.samples_per_speaker == 0 || self.support_size == 0 || self.eval_size == 0 || self.teacher_dim == 0 || self.speaker_factors == 0 {
            return Err(Error::Config("corpus sizes must be positive".into()));
        }
        Ok(())
    }
}

/// One training or evaluation item.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: Vec<usize>,
    /// Row of the model's speaker table.
    pub speaker: usize,
    pub mel: Tensor<f64>,
    pub aux: Tensor<f64>,
}

/// Teacher parts shared by every speaker of a corpus seed.
#[derive(Clone, Debug)]
struct Shared {
    table: Vec<Vec<f64>>,
    proj: Vec<Vec<f64>>,
    aux: Vec<f64>,
    /// Per factor: projection offset, mel bias, aux offset, aux bias.
    factors: Vec<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>, f64)>,
}

/// Frozen per-speaker target generator.
#[derive(Clone, Debug)]
pub struct Teacher {
    table: Vec<Vec<f64>>,
    proj: Vec<Vec<f64>>,
    bias: Vec<f64>,
    aux: Vec<f64>,
    aux_bias: f64,
}

fn rng(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, index, tag))
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Vec<Vec<f64>> {
    let n = Normal::new(0.0, std).expect("valid std");
    (0..rows).map(|_| (0..cols).map(|_| n.sample(rng)).collect()).collect()
}

fn shared(seed: u64, vocab: usize, n_mel: usize, dim: usize, n_factors: usize) -> Shared {
    let mut r = rng(seed, "teacher.shared", 0);
    let w = 1.0 / (dim as f64).sqrt();
    let table = normal_matrix(&mut r, vocab, dim, 1.0);
    let proj = normal_matrix(&mut r, dim, n_mel, w);
    let aux = normal_matrix(&mut r, 1, dim, w).remove(0);
    let factors = (0..n_factors)
        .map(|_| {
            let p = normal_matrix(&mut r, dim, n_mel, w);
            let b = normal_matrix(&mut r, 1, n_mel, 0.3).remove(0);
            let a = normal_matrix(&mut r, 1, dim, w).remove(0);
            let ab = normal_matrix(&mut r, 1, 1, 0.3)[0][0];
            (p, b, a, ab)
        })
        .collect();
    Shared {
        table,
        proj,
        aux,
        factors,
    }
}

impl Teacher {
    /// Teacher of speaker `key` under corpus `seed`.
    pub fn new(seed: u64, key: u64, vocab: usize, n_mel: usize, cfg: &CorpusConfig) -> Self {
        let dim = cfg.teacher_dim;
        let base = shared(seed, vocab, n_mel, dim, cfg.speaker_factors);
        let mut r = rng(seed, "teacher.speaker", key);
        let normal = Normal::new(0.0, 1.0 / (cfg.speaker_factors as f64).sqrt()).expect("valid std");
        let coef: Vec<f64> = (0..cfg.speaker_factors).map(|_| normal.sample(&mut r)).collect();
        let mut proj = base.proj;
        let mut bias = vec![0.0; n_mel];
        let mut aux = base.aux;
        let mut aux_bias = 0.0;
        for (c, (p, b, a, ab)) in coef.iter().zip(&base.factors) {
            for (row, prow) in proj.iter_mut().zip(p) {
                for (v, pv) in row.iter_mut().zip(prow) {
                    *v += 0.5 * c * pv;
                }
            }
            for (v, bv) in bias.iter_mut().zip(b) {
                *v += c * bv;
            }
            for (v, av) in aux.iter_mut().zip(a) {
                *v += 0.5 * c * av;
            }
            aux_bias += c * ab;
        }
        Self {
            table: base.table,
            proj,
            bias,
            aux,
            aux_bias,
        }
    }

    pub fn n_mel(&self) -> usize {
        self.bias.len()
    }

    /// `(mel [L × n_mel], aux [L])` for a token sequence.
    pub fn targets(&self, tokens: &[usize]) -> Result<(Tensor<f64>, Tensor<f64>)> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.table.len()) {
            return Err(Error::UnknownToken {
                id,
                vocab: self.table.len(),
            });
        }
        let dim = self.aux.len();
        let len = tokens.len() as f64;
        let mean: Vec<f64> = (0..dim)
            .map(|j| tokens.iter().map(|&t| self.table[t][j]).sum::<f64>() / len)
            .collect();
        let n_mel = self.n_mel();
        let mut mel = Vec::with_capacity(tokens.len() * n_mel);
        let mut aux = Vec::with_capacity(tokens.len());
        for (i, &t) in tokens.iter().enumerate() {
            let h: Vec<f64> = (0..dim)
                .map(|j| {
                    let prev = if i > 0 { self.table[tokens[i - 1]][j] } else { 0.0 };
                    self.table[t][j] + 0.5 * prev + 0.3 * mean[j]
                })
                .collect();
            for m in 0..n_mel {
                let v: f64 = (0..dim).map(|j| h[j] * self.proj[j][m]).sum();
                mel.push(1.5 * v.tanh() + self.bias[m]);
            }
            let a: f64 = (0..dim).map(|j| h[j] * self.aux[j]).sum();
            aux.push(a.tanh() + self.aux_bias);
        }
        Ok((Tensor::matrix(tokens.len(), n_mel, mel)?, Tensor::vector(aux)?))
    }
}

/// Vocabulary and output sizes the generated data must match.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataShape {
    pub vocab_size: usize,
    pub n_mel: usize,
}

fn sequences(r: &mut ChaCha8Rng, n: usize, cfg: &CorpusConfig, vocab: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|_| {
            let len = r.gen_range(cfg.min_len..=cfg.max_len);
            (0..len).map(|_| r.gen_range(0..vocab)).collect()
        })
        .collect()
}

fn examples(teacher: &Teacher, speaker: usize, seqs: Vec<Vec<usize>>) -> Result<Vec<Example>> {
    seqs.into_iter()
        .map(|tokens| {
            let (mel, aux) = teacher.targets(&tokens)?;
            Ok(Example {
                tokens,
                speaker,
                mel,
                aux,
            })
        })
        .collect()
}

/// Pretraining data: training and held-out items for speakers `0..n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

/// `n_speakers × samples_per_speaker` training items (plus held-out items),
/// fully determined by `seed`.
pub fn make_synthetic_corpus(seed: u64, shape: DataShape, cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for s in 0..cfg.pretrain_speakers {
        let teacher = Teacher::new(seed, s as u64, shape.vocab_size, shape.n_mel, cfg);
        let mut r = rng(seed, "corpus.tokens", s as u64);
        let seqs = sequences(&mut r, cfg.samples_per_speaker + cfg.eval_per_speaker, cfg, shape.vocab_size);
        let (tr, ev) = seqs.split_at(cfg.samples_per_speaker);
        train.extend(examples(&teacher, s, tr.to_vec())?);
        eval.extend(examples(&teacher, s, ev.to_vec())?);
    }
    Ok(Corpus { train, eval })
}

/// Few-shot adaptation task for one unseen speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct CloneTask {
    pub task_seed: u64,
    pub speaker: usize,
    pub support: Vec<Example>,
    pub eval: Vec<Example>,
}

/// Clone task for a new speaker whose teacher is keyed by `task_seed`, stored
/// in speaker row `slot`. Support and eval sequences are disjoint.
pub fn make_clone_task(
    corpus_seed: u64,
    task_seed: u64,
    slot: usize,
    shape: DataShape,
    cfg: &CorpusConfig,
) -> Result<CloneTask> {
    cfg.validate()?;
    let key = (1u64 << 32) + task_seed;
    let teacher = Teacher::new(corpus_seed, key, shape.vocab_size, shape.n_mel, cfg);
    let mut r = rng(corpus_seed, "clone.tokens", key);
    let want = cfg.support_size + cfg.eval_size;
    let mut seqs: Vec<Vec<usize>> = Vec::with_capacity(want);
    while seqs.len() < want {
        let s = sequences(&mut r, 1, cfg, shape.vocab_size).remove(0);
        if !seqs.contains(&s) {
            seqs.push(s);
        }
    }
    let eval_seqs = seqs.split_off(cfg.support_size);
    Ok(CloneTask {
        task_seed,
        speaker: slot,
        support: examples(&teacher, slot, seqs)?,
        eval: examples(&teacher, slot, eval_seqs)?,
    })
}

impl Example {
    pub fn mel_as<T: Real>(&self) -> Tensor<T> {
        self.mel.cast()
    }

    pub fn aux_as<T: Real>(&self) -> Tensor<T> {
        self.aux.cast()
    }
}
