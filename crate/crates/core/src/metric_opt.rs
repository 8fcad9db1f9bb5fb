//! Pixel-space image restoration driven by a (smoothed) quality metric.
//!
//! Starting from `y = x_noisy`, Adam minimizes
//! `w (1 − Q(y) / range) + MSE(y, x_noisy) / 1000`, where `w` is the quality
//! weight (1 by default). For smoothed backends `Q` is the median of
//! `M(D(y + r_i))` over `N` draws; since the median has no useful gradient
//! through the sort, the step uses the mean of the per-sample gradients.
//! The clean image only feeds the logged RMSE.

use serde::{Deserialize, Serialize};

use crate::attack::Defense;
use crate::error::{Error, Result};
use crate::models::{DenoiserModel, DifferentiableScorer, QualityModel, Scorer};
use crate::optim::Adam;
use crate::smoothing;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub steps: usize,
    pub lr: f64,
    pub n_samples: usize,
    pub sigma: f64,
    pub backend: Defense,
    pub seed: u64,
    /// Weight of the quality term; 0 leaves only the anchor.
    pub quality_weight: f64,
    pub log_every: usize,
}

impl OptConfig {
    pub fn new(backend: Defense, sigma: f64, seed: u64) -> Self {
        OptConfig {
            steps: 1000,
            lr: 1e-5,
            n_samples: 100,
            sigma,
            backend,
            seed,
            quality_weight: 1.0,
            log_every: 50,
        }
    }

    fn validate(&self, denoiser: Option<&DenoiserModel>) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be positive"));
        }
        if self.backend != Defense::None {
            if !(self.sigma > 0.0) {
                return Err(Error::config("sigma", "must be positive"));
            }
            if self.n_samples == 0 {
                return Err(Error::config("n", "need at least one noise sample"));
            }
        }
        if self.backend.needs_denoiser() && denoiser.is_none() {
            return Err(Error::config("denoiser", format!("backend {} needs a denoiser", self.backend.name())));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptStep {
    pub step: usize,
    pub loss: f64,
    pub q_value: f64,
    pub rmse_vs_clean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptOutcome {
    /// `clamp01(y)` after the last step.
    pub y_final: Tensor,
    /// Logged every `log_every` steps, plus step 0 and the final step.
    pub trajectory: Vec<OptStep>,
    /// Smallest and largest pixel of `y` seen before clamping.
    pub pixel_extent: (f64, f64),
}

pub fn trajectory_csv(steps: &[OptStep]) -> String {
    let mut s = String::from("step,loss,q_value,rmse_vs_clean\n");
    for r in steps {
        s.push_str(&format!("{},{:.10e},{:.10},{:.10}\n", r.step, r.loss, r.q_value, r.rmse_vs_clean));
    }
    s
}

fn rmse(a: &Tensor, b: &Tensor) -> Result<f64> {
    let d = a.zip_map(b, "rmse", |x, y| (x - y) * (x - y))?;
    Ok((d.sum() / d.len() as f64).sqrt())
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len().div_ceil(2) - 1]
}

/// Quality value and loss gradient at `y`.
fn evaluate(
    y: &Tensor,
    x_noisy: &Tensor,
    metric: &QualityModel,
    denoiser: Option<&DenoiserModel>,
    cfg: &OptConfig,
    step: usize,
) -> Result<(f64, f64, Tensor)> {
    let range = metric.score_range();
    let mut tape = Tape::new();
    let yv = tape.leaf(y.clone(), true);
    let anchor = tape.constant(x_noisy.clone());
    let mse = tape.mse(yv, anchor)?;
    let mut batch_shape = vec![1];
    batch_shape.extend_from_slice(y.shape());
    let (q_logged, q_var) = if cfg.backend == Defense::None {
        let yb = tape.reshape(yv, &batch_shape)?;
        let s = metric.score_on_tape(&mut tape, yb)?;
        let s = tape.mean(s)?;
        (tape.value(s).item(), s)
    } else {
        let n = cfg.n_samples;
        let stream = (step * n) as u64;
        let mut noise = Vec::with_capacity(n * y.len());
        for i in 0..n {
            noise.extend(smoothing::noise(y.shape(), cfg.sigma, cfg.seed, stream + i as u64).into_data());
        }
        batch_shape[0] = n;
        let r = tape.constant(Tensor::new(batch_shape.clone(), noise)?);
        let yb = tape.reshape(yv, &[1, y.len()])?;
        let tiled = tape.tile_batch(yb, n)?;
        let tiled = tape.reshape(tiled, &batch_shape)?;
        let noisy = tape.add(tiled, r)?;
        let input = match denoiser.filter(|_| cfg.backend.needs_denoiser()) {
            Some(d) => {
                let params = crate::models::Module::bind(d, &mut tape, false);
                d.forward(&mut tape, &params, noisy)?
            }
            None => noisy,
        };
        let s = metric.score_on_tape(&mut tape, input)?;
        let mut samples = tape.value(s).data().to_vec();
        let mean = tape.mean(s)?;
        (median(&mut samples), mean)
    };
    let q_term = tape.mul_scalar(q_var, -cfg.quality_weight / range)?;
    let q_term = tape.add_scalar(q_term, cfg.quality_weight)?;
    let anchor_term = tape.mul_scalar(mse, 1e-3)?;
    let loss = tape.add(q_term, anchor_term)?;
    tape.backward(loss)?;
    let grad = tape.grad(yv).expect("y requires grad");
    let logged_loss = cfg.quality_weight * (1.0 - q_logged / range) + tape.value(mse).item() * 1e-3;
    Ok((q_logged, logged_loss, grad))
}

pub fn optimize_image(
    x_noisy: &Tensor,
    x_clean: &Tensor,
    metric: &QualityModel,
    denoiser: Option<&DenoiserModel>,
    cfg: &OptConfig,
) -> Result<OptOutcome> {
    cfg.validate(denoiser)?;
    if x_noisy.shape() != x_clean.shape() {
        return Err(Error::dim("optimize_image", "shape", format!("{:?}", x_clean.shape()), format!("{:?}", x_noisy.shape())));
    }
    let mut y = x_noisy.clone();
    let mut adam = Adam::new(cfg.lr);
    let mut trajectory = Vec::new();
    let fold = |ext: (f64, f64), t: &Tensor| {
        t.data().iter().fold(ext, |(lo, hi), &v| (lo.min(v), hi.max(v)))
    };
    let mut extent = fold((f64::INFINITY, f64::NEG_INFINITY), &y);
    for step in 0..=cfg.steps {
        let (q, loss, grad) = evaluate(&y, x_noisy, metric, denoiser, cfg, step)?;
        if step % cfg.log_every == 0 || step == cfg.steps {
            trajectory.push(OptStep {
                step,
                loss,
                q_value: q,
                rmse_vs_clean: rmse(&y, x_clean)?,
            });
        }
        if step == cfg.steps {
            break;
        }
        adam.step(&mut [&mut y], &[&grad])?;
        extent = fold(extent, &y);
    }
    Ok(OptOutcome {
        y_final: y.clamp01(),
        trajectory,
        pixel_extent: extent,
    })
}
