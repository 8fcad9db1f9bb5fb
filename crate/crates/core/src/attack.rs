//! L2-budget gradient attack on the base metric and evaluation of smoothed
//! defenses on the resulting adversarial images.
//!
//! The attack minimizes `(M(x) − M(x + Δx)) / range + max(0, ‖Δx‖ − ε)` with
//! Adam from `Δx = 0`, then projects `Δx` onto the ε-ball and clamps the
//! image to `[0, 1]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::models::{DenoiserModel, DifferentiableScorer, QualityModel, Scorer};
use crate::optim::Adam;
use crate::smoothing::{self, SmoothingConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(epsilon: f64, seed: u64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::config("eps", format!("attack budget must be positive, got {epsilon}")));
        }
        Ok(AttackConfig {
            epsilon,
            steps: 1000,
            lr: 5e-4,
            seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub x_adv: Tensor,
    /// `‖x_adv − x‖₂` after projection and clamping.
    pub delta_norm: f64,
    pub score_before: f64,
    pub score_after: f64,
    /// `(score_after − score_before) / range`.
    pub adv_gain: f64,
}

/// Attacks a single `[3, h, w]` image. The starting point is deterministic,
/// so `cfg.seed` only labels the run.
pub fn attack(metric: &dyn DifferentiableScorer, x: &Tensor, cfg: &AttackConfig) -> Result<AttackResult> {
    if x.rank() != 3 {
        return Err(Error::dim("attack", "rank", 3, x.rank()));
    }
    let range = metric.score_range();
    let score_before = metric.score(x)?;
    let mut batch_shape = vec![1];
    batch_shape.extend_from_slice(x.shape());
    let mut delta = Tensor::zeros(x.shape());
    let mut adam = Adam::new(cfg.lr);
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let d = tape.leaf(delta.clone(), true);
        let xc = tape.constant(x.clone());
        let xa = tape.add(xc, d)?;
        let xb = tape.reshape(xa, &batch_shape)?;
        let s = metric.score_on_tape(&mut tape, xb)?;
        let base = tape.constant(Tensor::scalar(score_before));
        let drop = tape.sub(base, s)?;
        let drop = tape.mul_scalar(drop, 1.0 / range)?;
        let norm = tape.l2_norm(d)?;
        let excess = tape.add_scalar(norm, -cfg.epsilon)?;
        let penalty = tape.relu(excess)?;
        let loss = tape.add(drop, penalty)?;
        tape.backward(loss)?;
        let g = tape.grad(d).expect("delta requires grad");
        adam.step(&mut [&mut delta], &[&g])?;
    }
    let norm = delta.l2_norm();
    if norm > cfg.epsilon {
        let k = cfg.epsilon / norm;
        delta = delta.map(|v| v * k);
    }
    let x_adv = x.zip_map(&delta, "attack", |a, b| a + b)?.clamp01();
    let delta_norm = x_adv.zip_map(x, "attack", |a, b| a - b)?.l2_norm();
    let score_after = metric.score(&x_adv)?;
    Ok(AttackResult {
        x_adv,
        delta_norm,
        score_before,
        score_after,
        adv_gain: (score_after - score_before) / range,
    })
}

/// Attacks every image, in parallel across images.
pub fn attack_all(metric: &(dyn DifferentiableScorer + Sync), images: &[Tensor], cfg: &AttackConfig) -> Result<Vec<AttackResult>> {
    images.par_iter().map(|x| attack(metric, x, cfg)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Defense {
    None,
    Ms,
    Dms,
    DmsIqa,
}

impl Defense {
    pub const ALL: [Defense; 4] = [Defense::None, Defense::Ms, Defense::Dms, Defense::DmsIqa];

    pub fn name(self) -> &'static str {
        match self {
            Defense::None => "none",
            Defense::Ms => "ms",
            Defense::Dms => "dms",
            Defense::DmsIqa => "dms_iqa",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.name() == s)
    }

    pub fn needs_denoiser(self) -> bool {
        matches!(self, Defense::Dms | Defense::DmsIqa)
    }
}

/// Writes finite values as JSON numbers and infinities as the strings
/// `"inf"` / `"-inf"`.
pub fn serialize_extended_f64<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackRecord {
    pub image_id: usize,
    pub eps: f64,
    pub defense: Defense,
    /// Defended clean score: certified median, or the raw metric score
    /// without a defense.
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "S_adv")]
    pub s_adv: f64,
    #[serde(rename = "S_l", serialize_with = "serialize_extended_f64")]
    pub s_l: f64,
    #[serde(rename = "S_u", serialize_with = "serialize_extended_f64")]
    pub s_u: f64,
    pub adv_gain: f64,
    #[serde(serialize_with = "serialize_extended_f64")]
    pub cd_l: f64,
    #[serde(serialize_with = "serialize_extended_f64")]
    pub cd_u: f64,
    pub delta_norm: f64,
    /// Bounds from certifying the attacked image itself.
    #[serde(skip)]
    pub adv_bounds: (f64, f64),
}

impl AttackRecord {
    /// Whether the attacked defended score stays inside the interval
    /// certified at the clean image.
    pub fn within_clean_interval(&self) -> bool {
        self.s_l <= self.s_adv && self.s_adv <= self.s_u
    }

    /// Whether the attacked defended score lies inside the interval
    /// certified at the attacked image.
    pub fn within_own_interval(&self) -> bool {
        self.adv_bounds.0 <= self.s_adv && self.s_adv <= self.adv_bounds.1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackSummary {
    pub defense: Defense,
    pub eps: f64,
    pub images: usize,
    pub mean_adv_gain: f64,
    pub mean_abs_adv_gain: f64,
    #[serde(serialize_with = "serialize_extended_f64")]
    pub mean_cd_l: f64,
    #[serde(serialize_with = "serialize_extended_f64")]
    pub mean_cd_u: f64,
    pub within_clean_interval: usize,
    pub within_own_interval: usize,
}

/// Scores clean and attacked images under one defense. Smoothed defenses
/// certify both points with the same noise seed.
pub fn evaluate_under_attack(
    metric: &QualityModel,
    defense: Defense,
    denoiser: Option<&DenoiserModel>,
    clean: &[Tensor],
    attacks: &[AttackResult],
    attack_eps: f64,
    cfg: &SmoothingConfig,
) -> Result<(Vec<AttackRecord>, AttackSummary)> {
    if clean.len() != attacks.len() {
        return Err(Error::dim("evaluate_under_attack", "images", clean.len(), attacks.len()));
    }
    if defense.needs_denoiser() && denoiser.is_none() {
        return Err(Error::config("denoiser", format!("defense {} needs a denoiser", defense.name())));
    }
    let d = if defense.needs_denoiser() { denoiser } else { None };
    let range = metric.score_range();
    if defense != Defense::None {
        cfg.indices()?;
    }
    let records: Vec<AttackRecord> = clean
        .par_iter()
        .zip(attacks)
        .enumerate()
        .map(|(image_id, (x, a))| {
            let (s, s_adv, s_l, s_u, adv_bounds) = if defense == Defense::None {
                let inf = f64::INFINITY;
                (a.score_before, a.score_after, -inf, inf, (-inf, inf))
            } else {
                let c = smoothing::smooth(metric, x, cfg, d)?;
                let ca = smoothing::smooth(metric, &a.x_adv, cfg, d)?;
                (c.median, ca.median, c.lower, c.upper, (ca.lower, ca.upper))
            };
            Ok(AttackRecord {
                image_id,
                eps: attack_eps,
                defense,
                s,
                s_adv,
                s_l,
                s_u,
                adv_gain: (s_adv - s) / range,
                cd_l: (s - s_l) / range,
                cd_u: (s_u - s) / range,
                delta_norm: a.delta_norm,
                adv_bounds,
            })
        })
        .collect::<Result<_>>()?;
    let n = records.len().max(1) as f64;
    let mean = |f: &dyn Fn(&AttackRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let summary = AttackSummary {
        defense,
        eps: attack_eps,
        images: records.len(),
        mean_adv_gain: mean(&|r| r.adv_gain),
        mean_abs_adv_gain: mean(&|r| r.adv_gain.abs()),
        mean_cd_l: mean(&|r| r.cd_l),
        mean_cd_u: mean(&|r| r.cd_u),
        within_clean_interval: records.iter().filter(|r| r.within_clean_interval()).count(),
        within_own_interval: records.iter().filter(|r| r.within_own_interval()).count(),
    };
    Ok((records, summary))
}
