//! Losses and training loops for the metric and the denoiser.
//!
//! The denoiser objective is `MSE + c_r RANK + c_t TARG`:
//!
//! * `MSE`: mean squared pixel error between clean images and denoised noisy
//!   copies;
//! * `RANK`: pairwise penalty on metric predictions `p = M(D(x̃))` that
//!   disagree in order with the MOS labels, normalized by `1 + max |R|`;
//! * `TARG`: mean squared gap between `M(x)` (a fixed target) and `M(D(x̃))`.
//!
//! The metric is never updated while training the denoiser.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabeledImage, Split};
use crate::error::{Error, Result};
use crate::eval::srocc;
use crate::models::{DenoiserModel, DifferentiableScorer, Module, QualityModel, Scorer};
use crate::optim::Adam;
use crate::smoothing;
use crate::tape::{self, Tape, Var};
use crate::tensor::Tensor;

/// `R_ij = (p_i − p_j) sign(t_j − t_i)`, row-major `n × n`.
pub fn ranking_matrix(p: &[f64], t: &[f64]) -> Vec<f64> {
    let n = p.len();
    let mut r = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            r[i * n + j] = (p[i] - p[j]) * tape::sign(t[j] - t[i]);
        }
    }
    r
}

/// `(1/n²) Σ max(0, R_ij) / (1 + max |R_ij|)`.
pub fn rank_loss(p: &[f64], t: &[f64]) -> Result<f64> {
    if p.len() != t.len() {
        return Err(Error::dim("rank_loss", "length", p.len(), t.len()));
    }
    let r = ranking_matrix(p, t);
    let norm = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let n = p.len() as f64;
    Ok(r.iter().filter(|&&v| v > 0.0).fold(0.0, |a, v| a + v) / (n * n) / (1.0 + norm))
}

/// Mean squared pixel error over a batch, `(1/(3 N d1 d2)) Σ ‖x_i − y_i‖²`.
pub fn mse_loss(clean: &Tensor, denoised: &Tensor) -> Result<f64> {
    let diff = clean.zip_map(denoised, "mse_loss", |a, b| (a - b) * (a - b))?;
    Ok(diff.sum() / diff.len() as f64)
}

/// `(1/N) Σ [M(x_i) − M(y_i)]²` on raw metric scores.
pub fn target_loss(metric: &dyn Scorer, clean: &Tensor, denoised: &Tensor) -> Result<f64> {
    let a = metric.score_batch(clean)?;
    let b = metric.score_batch(denoised)?;
    if a.len() != b.len() {
        return Err(Error::dim("target_loss", "batch", a.len(), b.len()));
    }
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub c_r: f64,
    pub c_t: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { c_r: 1.0, c_t: 1000.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    MseOnly,
    Composite,
}

/// The three loss terms and their weighted sum, as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub mse: Var,
    pub rank: Option<Var>,
    pub targ: Option<Var>,
    pub total: Var,
}

/// Records the denoiser objective for one batch on `tape`. `d_params` are the
/// bound denoiser parameters; the metric is recorded as constants, and its
/// clean-image targets are computed off the tape. With `mode = MseOnly` only
/// the pixel term is recorded. `frozen_norm` fixes the rank-loss normalizer
/// (used by gradient checks).
#[allow(clippy::too_many_arguments)]
pub fn composite_loss(
    tape: &mut Tape,
    denoiser: &DenoiserModel,
    d_params: &[Var],
    metric: &dyn DifferentiableScorer,
    clean: &Tensor,
    noisy: &Tensor,
    mos: &[f64],
    mode: TrainMode,
    weights: LossWeights,
    frozen_norm: Option<f64>,
) -> Result<LossTerms> {
    let x = tape.constant(clean.clone());
    let xn = tape.constant(noisy.clone());
    let y = denoiser.forward(tape, d_params, xn)?;
    let mse = tape.mse(y, x)?;
    if mode == TrainMode::MseOnly {
        return Ok(LossTerms {
            mse,
            rank: None,
            targ: None,
            total: mse,
        });
    }
    let n = clean.shape()[0];
    if n < 2 {
        return Err(Error::config("batch_size", "composite loss needs at least 2 images per batch"));
    }
    if mos.len() != n {
        return Err(Error::dim("composite_loss", "mos", n, mos.len()));
    }
    let p = metric.score_on_tape(tape, y)?;
    let rank = tape.rank_loss(p, mos, frozen_norm)?;
    let targets = tape.constant(Tensor::new(vec![n], metric.score_batch(clean)?)?);
    let gap = tape.sub(p, targets)?;
    let sq = tape.square(gap)?;
    let targ = tape.mean(sq)?;
    let wr = tape.mul_scalar(rank, weights.c_r)?;
    let wt = tape.mul_scalar(targ, weights.c_t)?;
    let s = tape.add(mse, wr)?;
    let total = tape.add(s, wt)?;
    Ok(LossTerms {
        mse,
        rank: Some(rank),
        targ: Some(targ),
        total,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sigma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub weights: LossWeights,
}

impl TrainConfig {
    /// Pretraining defaults: lr 1e-3, 30 epochs.
    pub fn mse_only(sigma: f64, seed: u64) -> Self {
        TrainConfig {
            sigma,
            batch_size: 15,
            epochs: 30,
            lr: 1e-3,
            seed,
            mode: TrainMode::MseOnly,
            weights: LossWeights::default(),
        }
    }

    /// Fine-tuning defaults: lr 1e-4, 50 epochs.
    pub fn composite(sigma: f64, seed: u64) -> Self {
        TrainConfig {
            lr: 1e-4,
            epochs: 50,
            mode: TrainMode::Composite,
            ..Self::mse_only(sigma, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::config("sigma", "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.batch_size == 0 || (self.mode == TrainMode::Composite && self.batch_size < 2) {
            return Err(Error::config("batch_size", "composite training needs at least 2 images per batch"));
        }
        if self.weights.c_r < 0.0 || self.weights.c_t < 0.0 {
            return Err(Error::config("weights", "loss coefficients must be non-negative"));
        }
        Ok(())
    }
}

/// One row of the denoiser training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mse: f64,
    pub rank: f64,
    pub targ: f64,
    pub total: f64,
    pub val_srocc: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,mse,rank,targ,total,val_srocc\n");
    for r in history {
        s.push_str(&format!(
            "{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10}\n",
            r.epoch, r.mse, r.rank, r.targ, r.total, r.val_srocc
        ));
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    /// Weights from the epoch with the best validation SROCC (epoch 0 is the
    /// starting point).
    pub model: M,
    pub best_epoch: usize,
    pub initial_val_srocc: f64,
    pub history: Vec<EpochRecord>,
}

fn split_items(data: &Dataset, split: Split, field: &str) -> Result<Vec<LabeledImage>> {
    let items: Vec<LabeledImage> = data.split(split).into_iter().cloned().collect();
    if items.is_empty() {
        return Err(Error::config(field, "split is empty"));
    }
    let shape = items[0].image.shape().to_vec();
    if let Some(bad) = items.iter().find(|it| it.image.shape() != shape.as_slice()) {
        return Err(Error::dim("dataset", "image shape", format!("{shape:?}"), format!("{:?}", bad.image.shape())));
    }
    Ok(items)
}

fn stack_images(items: &[&LabeledImage]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = items.iter().map(|it| &it.image).collect();
    Tensor::stack(&refs)
}

/// Seed of the fixed validation noise draw, kept apart from the training
/// stream so that validation is identical across epochs and runs.
fn val_noise_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Single-draw proxy for smoothed correlation: SROCC of `M(D(x + r))`
/// against MOS with one fixed noise draw per image.
pub fn proxy_srocc(denoiser: &DenoiserModel, metric: &QualityModel, items: &[LabeledImage], sigma: f64, seed: u64) -> Result<f64> {
    let mut scores = Vec::with_capacity(items.len());
    for chunk in items.chunks(smoothing::CHUNK) {
        let mut data = Vec::new();
        for (k, it) in chunk.iter().enumerate() {
            let idx = (scores.len() + k) as u64;
            let r = smoothing::noise(it.image.shape(), sigma, val_noise_seed(seed), idx);
            data.extend(it.image.data().iter().zip(r.data()).map(|(a, b)| a + b));
        }
        let mut shape = vec![chunk.len()];
        shape.extend_from_slice(chunk[0].image.shape());
        let batch = Tensor::new(shape, data)?;
        scores.extend(metric.score_batch(&denoiser.denoise_batch(&batch)?)?);
    }
    let mos: Vec<f64> = items.iter().map(|it| it.mos).collect();
    srocc(&scores, &mos)
}

fn shuffle<R: Rng>(order: &mut [usize], rng: &mut R) {
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
}

/// Trains the denoiser on the train split, selecting the best epoch by
/// validation proxy SROCC.
pub fn train_denoiser(init: &DenoiserModel, metric: &QualityModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome<DenoiserModel>> {
    cfg.validate()?;
    let train = split_items(data, Split::Train, "train split")?;
    let val = split_items(data, Split::Val, "val split")?;
    if val.len() < 3 {
        return Err(Error::config("val split", "need at least 3 validation images"));
    }
    let mut model = init.clone();
    let initial_val = proxy_srocc(&model, metric, &val, cfg.sigma, cfg.seed)?;
    let mut best = (initial_val, 0usize, model.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        shuffle(&mut order, &mut rng);
        let (mut sums, mut batches) = ([0.0f64; 4], 0usize);
        for idx in order.chunks(cfg.batch_size) {
            if cfg.mode == TrainMode::Composite && idx.len() < 2 {
                continue;
            }
            let items: Vec<&LabeledImage> = idx.iter().map(|&i| &train[i]).collect();
            let clean = stack_images(&items)?;
            let mut noisy = clean.clone();
            for v in noisy.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += cfg.sigma * z;
            }
            let mos: Vec<f64> = items.iter().map(|it| it.mos).collect();
            let mut tape = Tape::new();
            let params = model.bind(&mut tape, true);
            let terms = composite_loss(&mut tape, &model, &params, metric, &clean, &noisy, &mos, cfg.mode, cfg.weights, None)?;
            tape.backward(terms.total)?;
            let grads: Vec<Tensor> = params.iter().map(|&p| tape.grad(p).expect("trainable parameter")).collect();
            let value = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
            sums[0] += tape.value(terms.mse).item();
            sums[1] += value(terms.rank);
            sums[2] += value(terms.targ);
            sums[3] += tape.value(terms.total).item();
            batches += 1;
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            adam.step(&mut model.params_mut(), &grad_refs)?;
        }
        let b = batches.max(1) as f64;
        let val_srocc = proxy_srocc(&model, metric, &val, cfg.sigma, cfg.seed)?;
        history.push(EpochRecord {
            epoch,
            mse: sums[0] / b,
            rank: sums[1] / b,
            targ: sums[2] / b,
            total: sums[3] / b,
            val_srocc,
        });
        if val_srocc > best.0 {
            best = (val_srocc, epoch, model.clone());
        }
    }
    Ok(TrainOutcome {
        model: best.2,
        best_epoch: best.1,
        initial_val_srocc: initial_val,
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl MetricTrainConfig {
    pub fn new(seed: u64) -> Self {
        MetricTrainConfig {
            batch_size: 16,
            epochs: 40,
            lr: 2e-3,
            seed,
        }
    }
}

/// One row of the metric training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_srocc: f64,
}

pub fn metric_history_csv(history: &[MetricEpochRecord]) -> String {
    let mut s = String::from("epoch,loss,val_srocc\n");
    for r in history {
        s.push_str(&format!("{},{:.10e},{:.10}\n", r.epoch, r.loss, r.val_srocc));
    }
    s
}

fn clean_srocc(metric: &QualityModel, items: &[LabeledImage]) -> Result<f64> {
    let refs: Vec<&LabeledImage> = items.iter().collect();
    let mut scores = Vec::with_capacity(items.len());
    for chunk in refs.chunks(64) {
        scores.extend(metric.score_batch(&stack_images(chunk)?)?);
    }
    let mos: Vec<f64> = items.iter().map(|it| it.mos).collect();
    srocc(&scores, &mos)
}

/// Regresses the metric onto MOS (squared error on the 0..1 rescaled score)
/// and keeps the epoch with the best validation SROCC.
pub fn train_metric(init: &QualityModel, data: &Dataset, cfg: &MetricTrainConfig) -> Result<(QualityModel, Vec<MetricEpochRecord>)> {
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::config("lr", "must be positive"));
    }
    let train = split_items(data, Split::Train, "train split")?;
    let val = split_items(data, Split::Val, "val split")?;
    if val.len() < 3 {
        return Err(Error::config("val split", "need at least 3 validation images"));
    }
    let mut model = init.clone();
    let range = model.range();
    let scale = 1.0 / range.width();
    let mut best = (clean_srocc(&model, &val).unwrap_or(f64::NEG_INFINITY), model.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        shuffle(&mut order, &mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let items: Vec<&LabeledImage> = idx.iter().map(|&i| &train[i]).collect();
            let batch = stack_images(&items)?;
            let target: Vec<f64> = items.iter().map(|it| (it.mos - range.lo) * scale).collect();
            let mut tape = Tape::new();
            let params = model.bind(&mut tape, true);
            let x = tape.constant(batch);
            let s = model.forward(&mut tape, &params, x)?;
            let s = tape.mul_scalar(s, scale)?;
            let s = tape.add_scalar(s, -range.lo * scale)?;
            let t = tape.constant(Tensor::new(vec![items.len()], target)?);
            let loss = tape.mse(s, t)?;
            tape.backward(loss)?;
            total += tape.value(loss).item();
            batches += 1;
            let grads: Vec<Tensor> = params.iter().map(|&p| tape.grad(p).expect("trainable parameter")).collect();
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            adam.step(&mut model.params_mut(), &grad_refs)?;
        }
        let val_srocc = clean_srocc(&model, &val)?;
        history.push(MetricEpochRecord {
            epoch,
            loss: total / batches.max(1) as f64,
            val_srocc,
        });
        if val_srocc > best.0 {
            best = (val_srocc, model.clone());
        }
    }
    Ok((best.1, history))
}
