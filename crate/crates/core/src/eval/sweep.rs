//! Hyperparameter grids: loss coefficients and batch size for the composite
//! fine-tune, and (σ, ε) for the smoothing itself.

use serde::Serialize;

use crate::attack::Defense;
use crate::data::{Dataset, LabeledImage, Split};
use crate::error::{Error, Result};
use crate::models::{DenoiserModel, QualityModel, Scorer};
use crate::smoothing::{self, SmoothingConfig};
use crate::training::{train_denoiser, LossWeights, TrainConfig, TrainMode};

use super::compare::Denoisers;
use super::correlation::{srocc, tau_closeness};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DefendedSummary {
    pub srocc: f64,
    pub tau_srocc: f64,
    pub tau_plcc: f64,
    pub mean_cd_pct: f64,
}

/// Correlation drop and mean certified delta of one smoothed pipeline.
pub fn evaluate_smoothed(
    metric: &QualityModel,
    denoiser: Option<&DenoiserModel>,
    items: &[LabeledImage],
    cfg: &SmoothingConfig,
) -> Result<DefendedSummary> {
    let certs: Vec<_> = items.iter().map(|it| smoothing::smooth(metric, &it.image, cfg, denoiser)).collect::<Result<_>>()?;
    let med: Vec<f64> = certs.iter().map(|c| c.median).collect();
    let cds: Vec<f64> = certs.iter().map(|c| c.cd_pct).collect();
    summarize(metric, items, &med, &cds)
}

fn summarize(metric: &QualityModel, items: &[LabeledImage], med: &[f64], cds: &[f64]) -> Result<DefendedSummary> {
    let mos: Vec<f64> = items.iter().map(|it| it.mos).collect();
    let base: Vec<f64> = items.iter().map(|it| metric.score(&it.image)).collect::<Result<_>>()?;
    let tau = tau_closeness(&base, med, &mos)?;
    Ok(DefendedSummary {
        srocc: srocc(med, &mos)?,
        tau_srocc: tau.tau_srocc,
        tau_plcc: tau.tau_plcc,
        mean_cd_pct: cds.iter().sum::<f64>() / cds.len() as f64,
    })
}

fn test_items(data: &Dataset) -> Result<Vec<LabeledImage>> {
    let items: Vec<LabeledImage> = data.split(Split::Test).into_iter().cloned().collect();
    if items.len() < 3 {
        return Err(Error::config("test split", "need at least 3 test images"));
    }
    Ok(items)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossSweepRow {
    pub c_r: f64,
    pub c_t: f64,
    #[serde(flatten)]
    pub result: DefendedSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatchSweepRow {
    pub batch: usize,
    #[serde(flatten)]
    pub result: DefendedSummary,
}

fn finetune_and_eval(
    metric: &QualityModel,
    dms: &DenoiserModel,
    data: &Dataset,
    cfg: &TrainConfig,
    eval_cfg: &SmoothingConfig,
    test: &[LabeledImage],
) -> Result<DefendedSummary> {
    let out = train_denoiser(dms, metric, data, cfg)?;
    evaluate_smoothed(metric, Some(&out.model), test, eval_cfg)
}

/// Fine-tunes one DMS-IQA denoiser per coefficient pair, starting each from
/// the DMS weights, and evaluates it on the test split.
pub fn loss_sweep(
    metric: &QualityModel,
    dms: &DenoiserModel,
    data: &Dataset,
    base: &TrainConfig,
    cells: &[LossWeights],
    eval_cfg: &SmoothingConfig,
) -> Result<Vec<LossSweepRow>> {
    let test = test_items(data)?;
    cells
        .iter()
        .map(|&w| {
            let cfg = TrainConfig { weights: w, mode: TrainMode::Composite, ..base.clone() };
            Ok(LossSweepRow { c_r: w.c_r, c_t: w.c_t, result: finetune_and_eval(metric, dms, data, &cfg, eval_cfg, &test)? })
        })
        .collect()
}

pub fn batch_sweep(
    metric: &QualityModel,
    dms: &DenoiserModel,
    data: &Dataset,
    base: &TrainConfig,
    sizes: &[usize],
    eval_cfg: &SmoothingConfig,
) -> Result<Vec<BatchSweepRow>> {
    let test = test_items(data)?;
    sizes
        .iter()
        .map(|&b| {
            let cfg = TrainConfig { batch_size: b, mode: TrainMode::Composite, ..base.clone() };
            Ok(BatchSweepRow { batch: b, result: finetune_and_eval(metric, dms, data, &cfg, eval_cfg, &test)? })
        })
        .collect()
}

pub fn loss_sweep_csv(rows: &[LossSweepRow]) -> String {
    let mut s = String::from("c_r,c_t,tau_srocc,tau_plcc,mean_cd_pct\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.6},{:.6},{:.6}\n", r.c_r, r.c_t, r.result.tau_srocc, r.result.tau_plcc, r.result.mean_cd_pct));
    }
    s
}

pub fn batch_sweep_csv(rows: &[BatchSweepRow]) -> String {
    let mut s = String::from("batch,tau_srocc,tau_plcc,mean_cd_pct\n");
    for r in rows {
        s.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.batch, r.result.tau_srocc, r.result.tau_plcc, r.result.mean_cd_pct));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpsSigmaRow {
    pub method: Defense,
    pub sigma: f64,
    pub epsilon: f64,
    pub feasible: bool,
    /// `None` when the cell is infeasible at this sample count.
    pub result: Option<DefendedSummary>,
}

/// SROCC and certified delta of MS, DMS and DMS-IQA over a (σ, ε) grid.
/// Samples are drawn once per (method, σ, image) and reused for every ε.
pub fn eps_sigma_sweep(
    metric: &QualityModel,
    denoisers: Denoisers<'_>,
    items: &[LabeledImage],
    sigmas: &[f64],
    epsilons: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<EpsSigmaRow>> {
    let range = metric.score_range();
    let mut rows = Vec::new();
    for method in [Defense::Ms, Defense::Dms, Defense::DmsIqa] {
        let d = denoisers.for_defense(method);
        for &sigma in sigmas {
            let probe = SmoothingConfig::new(sigma, 0.0, n_samples, seed)?;
            let samples: Vec<Vec<f64>> = items.iter().map(|it| smoothing::sample_scores(metric, &it.image, &probe, d)).collect::<Result<_>>()?;
            for &epsilon in epsilons {
                let cfg = SmoothingConfig::new(sigma, epsilon, n_samples, seed)?;
                let result = if cfg.indices().is_ok() {
                    let certs: Vec<_> = samples.iter().map(|s| smoothing::certify(s, &cfg, range)).collect::<Result<_>>()?;
                    let med: Vec<f64> = certs.iter().map(|c| c.median).collect();
                    let cds: Vec<f64> = certs.iter().map(|c| c.cd_pct).collect();
                    Some(summarize(metric, items, &med, &cds)?)
                } else {
                    None
                };
                rows.push(EpsSigmaRow { method, sigma, epsilon, feasible: result.is_some(), result });
            }
        }
    }
    Ok(rows)
}

pub fn eps_sigma_csv(rows: &[EpsSigmaRow]) -> String {
    let mut s = String::from("method,sigma,epsilon,feasible,srocc,tau_srocc,tau_plcc,mean_cd_pct\n");
    for r in rows {
        let tail = match &r.result {
            Some(v) => format!("{:.6},{:.6},{:.6},{:.6}", v.srocc, v.tau_srocc, v.tau_plcc, v.mean_cd_pct),
            None => ",,,".into(),
        };
        s.push_str(&format!("{},{},{},{},{}\n", r.method.name(), r.sigma, r.epsilon, r.feasible, tail));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GenConfig};

    fn setup() -> (QualityModel, DenoiserModel, Dataset) {
        (QualityModel::init(3), DenoiserModel::with_base(2, 2), generate(&GenConfig::new(40, 8, 8, 6)).unwrap())
    }

    #[test]
    fn single_cell_matches_direct_run() {
        let (m, d, data) = setup();
        let mut base = TrainConfig::composite(0.12, 1);
        base.epochs = 1;
        base.batch_size = 4;
        let eval = SmoothingConfig::new(0.12, 0.06, 30, 3).unwrap();
        let rows = loss_sweep(&m, &d, &data, &base, &[LossWeights::default()], &eval).unwrap();
        assert_eq!(rows.len(), 1);
        let direct = train_denoiser(&d, &m, &data, &base).unwrap();
        let test = test_items(&data).unwrap();
        assert_eq!(rows[0].result, evaluate_smoothed(&m, Some(&direct.model), &test, &eval).unwrap());
        let b = batch_sweep(&m, &d, &data, &base, &[2, 4], &eval).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[1].result, rows[0].result);
        assert!(b.iter().all(|r| r.result.mean_cd_pct >= 0.0));
        assert_eq!(loss_sweep_csv(&rows).lines().count(), 2);
    }

    #[test]
    fn eps_sigma_grid_marks_infeasible_cells() {
        let (m, d, data) = setup();
        let items: Vec<LabeledImage> = data.items[..5].to_vec();
        let rows = eps_sigma_sweep(&m, Denoisers { dms: &d, dms_iqa: &d }, &items, &[0.12, 0.24], &[0.06, 0.5], 100, 0).unwrap();
        assert_eq!(rows.len(), 3 * 2 * 2);
        // 0.5 / 0.12 exceeds the N=100 ratio limit of about 2.33.
        let r = rows.iter().find(|r| r.method == Defense::Ms && r.sigma == 0.12 && r.epsilon == 0.5).unwrap();
        assert!(!r.feasible && r.result.is_none());
        // Matches a direct certification at the same seed.
        let cfg = SmoothingConfig::new(0.24, 0.5, 100, 0).unwrap();
        let direct = evaluate_smoothed(&m, None, &items, &cfg).unwrap();
        let r = rows.iter().find(|r| r.method == Defense::Ms && r.sigma == 0.24 && r.epsilon == 0.5).unwrap();
        assert_eq!(r.result, Some(direct));
        assert!(eps_sigma_csv(&rows).contains("ms,0.12,0.5,false,,,,"));
    }
}
