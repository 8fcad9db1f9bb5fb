//! Method comparison: the undefended metric against MS, DMS and DMS-IQA
//! under each smoothing preset.

use serde::Serialize;

use crate::attack::{serialize_extended_f64, Defense};
use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::models::{DenoiserModel, QualityModel, Scorer};
use crate::smoothing::{self, SmoothingConfig};

use super::correlation::{plcc, srocc, tau_closeness};

/// The two trained denoisers behind DMS and DMS-IQA.
#[derive(Clone, Copy, Debug)]
pub struct Denoisers<'a> {
    pub dms: &'a DenoiserModel,
    pub dms_iqa: &'a DenoiserModel,
}

impl<'a> Denoisers<'a> {
    pub fn for_defense(&self, d: Defense) -> Option<&'a DenoiserModel> {
        match d {
            Defense::Dms => Some(self.dms),
            Defense::DmsIqa => Some(self.dms_iqa),
            Defense::None | Defense::Ms => None,
        }
    }
}

/// Table label of a defense.
pub fn method_label(d: Defense) -> &'static str {
    match d {
        Defense::None => "No-Defence",
        Defense::Ms => "MS",
        Defense::Dms => "DMS",
        Defense::DmsIqa => "DMS-IQA",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub preset: String,
    pub method: Defense,
    pub sigma: f64,
    pub epsilon: f64,
    pub srocc: f64,
    pub plcc: f64,
    pub tau_srocc: f64,
    pub tau_plcc: f64,
    /// Infinite for the undefended metric.
    #[serde(serialize_with = "serialize_extended_f64")]
    pub mean_cd_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageScore {
    pub preset: String,
    pub method: Defense,
    pub image_id: usize,
    pub mos: f64,
    pub metric_score: f64,
    pub median: f64,
    #[serde(serialize_with = "serialize_extended_f64")]
    pub lower: f64,
    #[serde(serialize_with = "serialize_extended_f64")]
    pub upper: f64,
    #[serde(serialize_with = "serialize_extended_f64")]
    pub cd_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub images: Vec<ImageScore>,
}

impl Comparison {
    pub fn row(&self, preset: &str, method: Defense) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.preset == preset && r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("preset,method,srocc,plcc,tau_srocc,tau_plcc,mean_cd_pct\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{}\n",
                r.preset,
                method_label(r.method),
                r.srocc,
                r.plcc,
                r.tau_srocc,
                r.tau_plcc,
                fmt_cd(r.mean_cd_pct)
            ));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<8} {:<11} {:>8} {:>8} {:>10} {:>10} {:>12}\n",
            "preset", "method", "srocc", "plcc", "tau_srocc", "tau_plcc", "mean_cd_pct"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<8} {:<11} {:>8.4} {:>8.4} {:>10.4} {:>10.4} {:>12}\n",
                r.preset,
                method_label(r.method),
                r.srocc,
                r.plcc,
                r.tau_srocc,
                r.tau_plcc,
                fmt_cd(r.mean_cd_pct)
            ));
        }
        s
    }
}

fn fmt_cd(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "inf".into()
    }
}

/// Scores every image under every preset and method. All smoothed methods
/// share the noise seed of their preset's config.
pub fn compare_methods(
    metric: &QualityModel,
    denoisers: Denoisers<'_>,
    items: &[LabeledImage],
    presets: &[(String, SmoothingConfig)],
) -> Result<Comparison> {
    if items.len() < 3 {
        return Err(Error::config("split", "need at least 3 images to compare"));
    }
    for (_, cfg) in presets {
        cfg.indices()?;
    }
    let mos: Vec<f64> = items.iter().map(|it| it.mos).collect();
    let base: Vec<f64> = items.iter().map(|it| metric.score(&it.image)).collect::<Result<_>>()?;
    let (base_srocc, base_plcc) = (srocc(&base, &mos)?, plcc(&base, &mos)?);
    let mut rows = Vec::new();
    let mut images = Vec::new();
    for (name, cfg) in presets {
        for method in Defense::ALL {
            let scores: Vec<(f64, f64, f64, f64)> = if method == Defense::None {
                base.iter().map(|&b| (b, f64::NEG_INFINITY, f64::INFINITY, f64::INFINITY)).collect()
            } else {
                let d = denoisers.for_defense(method);
                items
                    .iter()
                    .map(|it| {
                        let c = smoothing::smooth(metric, &it.image, cfg, d)?;
                        Ok((c.median, c.lower, c.upper, c.cd_pct))
                    })
                    .collect::<Result<_>>()?
            };
            let med: Vec<f64> = scores.iter().map(|s| s.0).collect();
            let (sr, pl) = if method == Defense::None { (base_srocc, base_plcc) } else { (srocc(&med, &mos)?, plcc(&med, &mos)?) };
            let tau = tau_closeness(&base, &med, &mos)?;
            rows.push(ComparisonRow {
                preset: name.clone(),
                method,
                sigma: cfg.sigma,
                epsilon: cfg.epsilon,
                srocc: sr,
                plcc: pl,
                tau_srocc: tau.tau_srocc,
                tau_plcc: tau.tau_plcc,
                mean_cd_pct: scores.iter().map(|s| s.3).sum::<f64>() / scores.len() as f64,
            });
            images.extend(scores.iter().enumerate().map(|(i, &(median, lower, upper, cd_pct))| ImageScore {
                preset: name.clone(),
                method,
                image_id: i,
                mos: mos[i],
                metric_score: base[i],
                median,
                lower,
                upper,
                cd_pct,
            }));
        }
    }
    Ok(Comparison { rows, images })
}
