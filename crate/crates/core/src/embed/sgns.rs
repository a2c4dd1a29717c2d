//! Skip-gram with negative sampling over time-window contexts.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::slice::{event_pairs, TimeSlice};
use crate::embed::token::{ActivityToken, TokenGranularity, Vocabulary};
use crate::error::{Error, Result};
use crate::rng;
use crate::time::{self, Timestamp};

const SIGMOID_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// Sequential SGD; bit-reproducible for a given seed.
    #[default]
    Deterministic,
    /// Lock-free concurrent updates (lost updates tolerated). Not reproducible.
    Throughput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgnsConfig {
    pub dim: usize,
    /// Context window in seconds.
    #[serde(with = "time::duration_serde")]
    pub window: i64,
    pub negatives: usize,
    /// Exponent of the smoothed unigram distribution for negatives.
    pub alpha: f64,
    /// Subsampling threshold; `0` disables subsampling.
    pub subsample: f64,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub granularity: TokenGranularity,
    pub mode: TrainingMode,
}

impl Default for SgnsConfig {
    fn default() -> Self {
        Self {
            dim: 120,
            window: 4 * time::HOUR,
            negatives: 5,
            alpha: 0.75,
            subsample: 1e-3,
            learning_rate: 0.025,
            min_learning_rate: 1e-4,
            epochs: 5,
            seed: 7,
            granularity: TokenGranularity::default(),
            mode: TrainingMode::default(),
        }
    }
}

impl SgnsConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.dim < 1 {
            errs.push("dim must be at least 1".to_string());
        }
        if self.negatives < 1 {
            errs.push("negatives must be at least 1".to_string());
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            errs.push(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if self.epochs < 1 {
            errs.push("epochs must be at least 1".to_string());
        }
        if self.window < 0 {
            errs.push("window must be non-negative".to_string());
        }
        if !(self.subsample >= 0.0) {
            errs.push("subsample threshold must be non-negative".to_string());
        }
        if !(self.learning_rate > 0.0) || !(self.min_learning_rate >= 0.0) || self.min_learning_rate > self.learning_rate {
            errs.push("learning rates must satisfy 0 <= min_learning_rate <= learning_rate, learning_rate > 0".to_string());
        }
        errs
    }

    fn check(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(errs.join("; ")))
        }
    }
}

/// Draws token ids with probability proportional to `count^alpha` from a
/// cumulative table.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    cumulative: Vec<f64>,
}

impl NegativeSampler {
    pub fn new(counts: &[usize], alpha: f64) -> Result<Self> {
        let mut acc = 0.0;
        let cumulative: Vec<f64> = counts
            .iter()
            .map(|&c| {
                acc += (c as f64).powf(alpha);
                acc
            })
            .collect();
        if cumulative.is_empty() || acc <= 0.0 {
            return Err(Error::InvalidInput("negative sampling needs a non-empty, non-zero count table".into()));
        }
        Ok(Self { cumulative })
    }

    pub fn sample(&self, rng: &mut rng::Rng) -> usize {
        let total = *self.cumulative.last().expect("non-empty table");
        let u = rng.random::<f64>() * total;
        self.cumulative.partition_point(|&c| c <= u).min(self.cumulative.len() - 1)
    }
}

/// `k` i.i.d. negative draws; the positive token may appear among them.
pub fn negative_sample(rng: &mut rng::Rng, counts: &[usize], alpha: f64, k: usize) -> Result<Vec<usize>> {
    let sampler = NegativeSampler::new(counts, alpha)?;
    Ok((0..k).map(|_| sampler.sample(rng)).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    (1.0 / (1.0 + (-x).exp())).clamp(SIGMOID_FLOOR, 1.0 - SIGMOID_FLOOR)
}

/// `−[log σ(y·c) + Σ log σ(−y·cₙ)]`.
pub fn sgns_pair_loss(y: &[f64], c: &[f64], negatives: &[&[f64]]) -> f64 {
    let mut loss = -sigmoid(dot(y, c)).ln();
    for n in negatives {
        loss -= (1.0 - sigmoid(dot(y, n))).ln();
    }
    loss
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairGradient {
    pub y: Vec<f64>,
    pub c: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

pub fn sgns_pair_gradient(y: &[f64], c: &[f64], negatives: &[&[f64]]) -> PairGradient {
    let pos = sigmoid(dot(y, c)) - 1.0;
    let mut gy: Vec<f64> = c.iter().map(|v| pos * v).collect();
    let gc = y.iter().map(|v| pos * v).collect();
    let mut gn = Vec::with_capacity(negatives.len());
    for n in negatives {
        let s = sigmoid(dot(y, n));
        for (g, v) in gy.iter_mut().zip(n.iter()) {
            *g += s * v;
        }
        gn.push(y.iter().map(|v| s * v).collect());
    }
    PairGradient { y: gy, c: gc, negatives: gn }
}

/// Learned vectors for one slice; row `i` of both matrices belongs to `tokens[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceEmbeddings {
    pub index: usize,
    pub start: Timestamp,
    pub end: Timestamp,
    pub tokens: Vec<ActivityToken>,
    pub counts: Vec<usize>,
    pub activity: DMatrix<f64>,
    pub context: DMatrix<f64>,
    pub config: SgnsConfig,
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
}

impl SliceEmbeddings {
    pub fn dim(&self) -> usize {
        self.activity.ncols()
    }

    pub fn position(&self, token: &ActivityToken) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn vector(&self, token: &ActivityToken) -> Option<Vec<f64>> {
        self.position(token).map(|i| self.activity.row(i).iter().copied().collect())
    }
}

pub(crate) struct Trained {
    pub activity: Vec<f64>,
    pub context: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

fn keep_probabilities(counts: &[usize], threshold: f64) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    counts
        .iter()
        .map(|&c| {
            let freq = c as f64 / total.max(1) as f64;
            if threshold > 0.0 && freq > threshold {
                (threshold / freq).sqrt()
            } else {
                1.0
            }
        })
        .collect()
}

fn epoch_pairs(
    event_tokens: &[usize],
    pairs: &[(usize, usize)],
    keep: &[f64],
    rng: &mut rng::Rng,
) -> Vec<(usize, usize)> {
    let kept: Vec<bool> = event_tokens.iter().map(|&t| keep[t] >= 1.0 || rng.random::<f64>() < keep[t]).collect();
    let mut out: Vec<(usize, usize)> = pairs
        .iter()
        .filter(|&&(i, j)| kept[i] && kept[j])
        .map(|&(i, j)| (event_tokens[i], event_tokens[j]))
        .collect();
    out.shuffle(rng);
    out
}

fn learning_rate(config: &SgnsConfig, progress: f64) -> f64 {
    (config.learning_rate - (config.learning_rate - config.min_learning_rate) * progress).max(config.min_learning_rate)
}

/// One SGD step for a (center, context) pair; returns the pair loss
/// evaluated before the update.
fn sgd_step(
    y: &mut [f64],
    ctx: &mut [f64],
    dim: usize,
    context: usize,
    negatives: &[usize],
    lr: f64,
    grad: &mut [f64],
) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut loss = 0.0;
    let targets = std::iter::once((context, 1.0)).chain(negatives.iter().map(|&n| (n, 0.0)));
    for (t, label) in targets {
        let c = &mut ctx[t * dim..(t + 1) * dim];
        let s = sigmoid(dot(y, c));
        loss -= if label > 0.0 { s.ln() } else { (1.0 - s).ln() };
        let g = lr * (label - s);
        for k in 0..dim {
            grad[k] += g * c[k];
            c[k] += g * y[k];
        }
    }
    for k in 0..dim {
        y[k] += grad[k];
    }
    loss
}

fn init_activity(n: usize, dim: usize, rng: &mut rng::Rng) -> Vec<f64> {
    let half = 0.5 / dim as f64;
    (0..n * dim).map(|_| rng.random_range(-half..half)).collect()
}

fn draw_negatives(sampler: &NegativeSampler, k: usize, positive: usize, rng: &mut rng::Rng, out: &mut Vec<usize>) {
    out.clear();
    for _ in 0..k {
        let n = sampler.sample(rng);
        // A draw equal to the positive context is skipped, as in word2vec.
        if n != positive {
            out.push(n);
        }
    }
}

/// Trains vectors from event-level pairs. `event_tokens[i]` is the token id
/// of event `i`; `pairs` index events. Subsampling drops whole events per epoch.
pub(crate) fn train_pairs(
    vocab_size: usize,
    event_tokens: &[usize],
    pairs: &[(usize, usize)],
    counts: &[usize],
    config: &SgnsConfig,
    seed: u64,
) -> Result<Trained> {
    config.check()?;
    let dim = config.dim;
    let mut rng = rng::seeded(seed);
    let mut activity = init_activity(vocab_size, dim, &mut rng);
    let mut context = vec![0.0; vocab_size * dim];
    let sampler = NegativeSampler::new(counts, config.alpha)?;
    let keep = keep_probabilities(counts, config.subsample);
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    match config.mode {
        TrainingMode::Deterministic => {
            let mut grad = vec![0.0; dim];
            let mut negs = Vec::with_capacity(config.negatives);
            for epoch in 0..config.epochs {
                let batch = epoch_pairs(event_tokens, pairs, &keep, &mut rng);
                let mut total = 0.0;
                for (step, &(center, ctx)) in batch.iter().enumerate() {
                    let progress = (epoch as f64 + step as f64 / batch.len() as f64) / config.epochs as f64;
                    let lr = learning_rate(config, progress);
                    draw_negatives(&sampler, config.negatives, ctx, &mut rng, &mut negs);
                    let y = &mut activity[center * dim..(center + 1) * dim];
                    total += sgd_step(y, &mut context, dim, ctx, &negs, lr, &mut grad);
                }
                epoch_losses.push(if batch.is_empty() { f64::NAN } else { total / batch.len() as f64 });
            }
        }
        TrainingMode::Throughput => {
            let shared_y: Vec<AtomicU64> = activity.iter().map(|v| AtomicU64::new(v.to_bits())).collect();
            let shared_c: Vec<AtomicU64> = context.iter().map(|v| AtomicU64::new(v.to_bits())).collect();
            let chunks = rayon::current_num_threads().max(1);
            for epoch in 0..config.epochs {
                let batch = epoch_pairs(event_tokens, pairs, &keep, &mut rng);
                let chunk_len = batch.len().div_ceil(chunks).max(1);
                let total: f64 = batch
                    .par_chunks(chunk_len)
                    .enumerate()
                    .map(|(ci, chunk)| {
                        let mut local = rng::stream(seed, (epoch * chunks + ci + 1) as u64);
                        let mut y = vec![0.0; dim];
                        let mut c = vec![0.0; (config.negatives + 1) * dim];
                        let mut grad = vec![0.0; dim];
                        let mut negs = Vec::new();
                        let mut loss = 0.0;
                        for (step, &(center, ctx)) in chunk.iter().enumerate() {
                            let progress = (epoch as f64 + step as f64 / chunk.len() as f64) / config.epochs as f64;
                            let lr = learning_rate(config, progress);
                            draw_negatives(&sampler, config.negatives, ctx, &mut local, &mut negs);
                            let ids: Vec<usize> = std::iter::once(ctx).chain(negs.iter().copied()).collect();
                            for k in 0..dim {
                                y[k] = f64::from_bits(shared_y[center * dim + k].load(Ordering::Relaxed));
                            }
                            for (slot, &t) in ids.iter().enumerate() {
                                for k in 0..dim {
                                    c[slot * dim + k] = f64::from_bits(shared_c[t * dim + k].load(Ordering::Relaxed));
                                }
                            }
                            let local_ids: Vec<usize> = (1..ids.len()).collect();
                            let before_y = y.clone();
                            let before_c = c.clone();
                            loss += sgd_step(&mut y, &mut c, dim, 0, &local_ids, lr, &mut grad);
                            for k in 0..dim {
                                let delta = y[k] - before_y[k];
                                let cell = &shared_y[center * dim + k];
                                let cur = f64::from_bits(cell.load(Ordering::Relaxed));
                                cell.store((cur + delta).to_bits(), Ordering::Relaxed);
                            }
                            for (slot, &t) in ids.iter().enumerate() {
                                for k in 0..dim {
                                    let delta = c[slot * dim + k] - before_c[slot * dim + k];
                                    let cell = &shared_c[t * dim + k];
                                    let cur = f64::from_bits(cell.load(Ordering::Relaxed));
                                    cell.store((cur + delta).to_bits(), Ordering::Relaxed);
                                }
                            }
                        }
                        loss
                    })
                    .sum();
                epoch_losses.push(if batch.is_empty() { f64::NAN } else { total / batch.len() as f64 });
            }
            activity = shared_y.iter().map(|a| f64::from_bits(a.load(Ordering::Relaxed))).collect();
            context = shared_c.iter().map(|a| f64::from_bits(a.load(Ordering::Relaxed))).collect();
        }
    }
    Ok(Trained { activity, context, epoch_losses })
}

/// Trains one non-empty slice. The slice seed is derived from the config
/// seed and the slice index.
pub fn train_slice(slice: &TimeSlice, config: &SgnsConfig) -> Result<SliceEmbeddings> {
    if slice.is_empty() {
        return Err(Error::InvalidInput(format!("slice {} is empty and cannot be trained", slice.index)));
    }
    let (vocab, event_tokens) = Vocabulary::build(&slice.events, config.granularity);
    let times: Vec<Timestamp> = slice.events.iter().map(|e| e.sent_time).collect();
    let pairs = event_pairs(&times, config.window);
    let seed = rng::derive_seed(config.seed, slice.index as u64);
    let trained = train_pairs(vocab.len(), &event_tokens, &pairs, &vocab.counts, config, seed)?;
    let n = vocab.len();
    let dim = config.dim;
    Ok(SliceEmbeddings {
        index: slice.index,
        start: slice.start,
        end: slice.end,
        tokens: vocab.tokens,
        counts: vocab.counts,
        activity: DMatrix::from_row_slice(n, dim, &trained.activity),
        context: DMatrix::from_row_slice(n, dim, &trained.context),
        config: config.clone(),
        seed,
        epoch_losses: trained.epoch_losses,
    })
}

/// Trains every non-empty slice concurrently; empty slices are skipped.
pub fn train_slices(slices: &[TimeSlice], config: &SgnsConfig) -> Result<Vec<SliceEmbeddings>> {
    slices
        .par_iter()
        .filter(|s| !s.is_empty())
        .map(|s| train_slice(s, config))
        .collect()
}
