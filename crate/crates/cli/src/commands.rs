//! Subcommand bodies. Each validates its configuration and inputs, computes,
//! and hands its artifacts to [`Run`] for hashing.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use certiqa::attack::{self, AttackConfig, Defense};
use certiqa::data::{generate, Dataset, GenConfig, LabeledImage, Split};
use certiqa::eval::sweep::{self, eps_sigma_sweep};
use certiqa::eval::{compare_methods, Denoisers};
use certiqa::metric_opt::{self, OptConfig};
use certiqa::models::{DenoiserModel, Module, QualityModel};
use certiqa::smoothing::{self, CertRecord, Preset, SmoothingConfig};
use certiqa::training::{self, LossWeights, MetricTrainConfig, TrainConfig};
use certiqa::Tensor;

use crate::config::RunConfig;
use crate::{CliError, Grid, Mode};

/// Denoiser width used when `base` is not configured.
pub const DEFAULT_BASE: usize = 8;

#[derive(Serialize)]
struct FileHash {
    path: String,
    sha256: String,
    bytes: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: Option<String>,
    config: std::collections::BTreeMap<String, String>,
    wall_clock_secs: f64,
    inputs: Vec<FileHash>,
    artifacts: Vec<FileHash>,
}

pub struct Run {
    out: PathBuf,
    inputs: Vec<PathBuf>,
    artifacts: Vec<PathBuf>,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn hash_file(path: &Path) -> Result<FileHash, CliError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(FileHash {
        path: path.display().to_string(),
        sha256: format!("{:x}", Sha256::digest(&bytes)),
        bytes: bytes.len(),
    })
}

impl Run {
    pub fn new(out: PathBuf) -> Self {
        Run { out, inputs: Vec::new(), artifacts: Vec::new() }
    }

    fn path(&self, name: &str) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(&self.out).map_err(|e| io_err(&self.out, e))?;
        Ok(self.out.join(name))
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let p = self.path(name)?;
        std::fs::write(&p, bytes).map_err(|e| io_err(&p, e))?;
        self.artifacts.push(p);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(format!("{name}: {e}")))?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    fn save_model(&mut self, name: &str, m: &dyn Module) -> Result<(), CliError> {
        let p = self.path(name)?;
        m.save(&p)?;
        self.artifacts.push(p);
        Ok(())
    }

    fn input(&mut self, p: PathBuf) -> PathBuf {
        self.inputs.push(p.clone());
        p
    }

    pub fn write_manifest(&mut self, command: &str, cfg: &RunConfig, secs: f64) -> Result<(), CliError> {
        let config = cfg.resolved();
        let manifest = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: config.get("seed").cloned(),
            wall_clock_secs: secs,
            inputs: self.inputs.iter().map(|p| hash_file(p)).collect::<Result<_, _>>()?,
            artifacts: self.artifacts.iter().map(|p| hash_file(p)).collect::<Result<_, _>>()?,
            config,
        };
        let name = format!("manifest_{}.json", command.replace('-', "_"));
        let p = self.path(&name)?;
        let s = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(&p, s + "\n").map_err(|e| io_err(&p, e))
    }
}

fn load_dataset(cfg: &RunConfig, run: &mut Run) -> Result<Dataset, CliError> {
    let p = run.input(cfg.input("dataset", "dataset.ctds")?);
    Ok(Dataset::load(&p)?)
}

fn load_metric(cfg: &RunConfig, run: &mut Run) -> Result<QualityModel, CliError> {
    let p = run.input(cfg.input("metric", "metric.ctiq")?);
    Ok(QualityModel::load(&p)?)
}

fn load_denoiser(cfg: &RunConfig, run: &mut Run, key: &str) -> Result<DenoiserModel, CliError> {
    let default = if key == "dms_iqa" { "denoiser_composite.ctiq" } else { "denoiser_mse.ctiq" };
    let p = run.input(cfg.input(key, default)?);
    Ok(DenoiserModel::load(&p)?)
}

fn denoiser_key(d: Defense) -> Option<&'static str> {
    match d {
        Defense::Dms => Some("dms"),
        Defense::DmsIqa => Some("dms_iqa"),
        Defense::None | Defense::Ms => None,
    }
}

/// `(dataset index, item)` pairs from the configured split, truncated to
/// the configured image count.
fn select<'a>(cfg: &RunConfig, data: &'a Dataset, split: &str, images: Option<usize>) -> Result<Vec<(usize, &'a LabeledImage)>, CliError> {
    let split: String = cfg.get("split", split.to_string())?;
    let wanted = match split.as_str() {
        "train" => Some(Split::Train),
        "val" => Some(Split::Val),
        "test" => Some(Split::Test),
        "all" => None,
        other => return Err(CliError::Usage(format!("split: expected train, val, test or all, got {other:?}"))),
    };
    let mut items: Vec<(usize, &LabeledImage)> =
        data.items.iter().enumerate().filter(|(_, it)| wanted.is_none_or(|s| it.split == s)).collect();
    let limit = match images {
        Some(d) => cfg.get("images", d)?,
        None => cfg.opt("images")?.unwrap_or(items.len()),
    };
    if limit == 0 || items.is_empty() {
        return Err(CliError::Usage(format!("images: nothing selected from split {split}")));
    }
    items.truncate(limit);
    Ok(items)
}

fn check_feasible(cfg: &SmoothingConfig) -> Result<(), CliError> {
    cfg.indices().map(|_| ()).map_err(CliError::from_core)
}

pub fn gen_data(cfg: &RunConfig, run: &mut Run) -> Result<(), CliError> {
    let g = GenConfig {
        count: cfg.get("count", 500)?,
        height: cfg.get("height", 32)?,
        width: cfg.get("width", 32)?,
        seed: cfg.seed()?,
        mos_noise: cfg.get("mos_noise", 0.0)?,
    };
    for (key, v) in [("height", g.height), ("width", g.width)] {
        if v == 0 || v % 8 != 0 {
            return Err(CliError::Usage(format!("{key}: must be a positive multiple of 8, got {v}")));
        }
    }
    if g.count < 10 {
        return Err(CliError::Usage(format!("count: need at least 10 images, got {}", g.count)));
    }
    if !(g.mos_noise >= 0.0) {
        return Err(CliError::Usage("mos_noise: must be non-negative".into()));
    }
    let d = generate(&g)?;
    run.write("dataset.ctds", &d.encode())
}

pub fn train_metric(cfg: &RunConfig, run: &mut Run) -> Result<(), CliError> {
    let data = load_dataset(cfg, run)?;
    let seed = cfg.seed()?;
    let defaults = MetricTrainConfig::new(seed);
    let mc = MetricTrainConfig {
        batch_size: cfg.get("batch", defaults.batch_size)?,
        epochs: cfg.get("epochs", defaults.epochs)?,
        lr: cfg.get("lr", defaults.lr)?,
        seed,
    };
    let (model, history) = training::train_metric(&QualityModel::init(seed), &data, &mc)?;
    run.save_model("metric.ctiq", &model)?;
    run.write("metric_history.csv", training::metric_history_csv(&history).as_bytes())
}

fn train_config(cfg: &RunConfig, base: TrainConfig) -> Result<TrainConfig, CliError> {
    Ok(TrainConfig {
        epochs: cfg.get("epochs", base.epochs)?,
        lr: cfg.get("lr", base.lr)?,
        batch_size: cfg.get("batch", base.batch_size)?,
        weights: LossWeights {
            c_r: cfg.get("c_r", base.weights.c_r)?,
            c_t: cfg.get("c_t", base.weights.c_t)?,
        },
        ..base
    })
}

pub fn train_denoiser(cfg: &RunConfig, run: &mut Run, mode: Mode) -> Result<(), CliError> {
    let data = load_dataset(cfg, run)?;
    let metric = load_metric(cfg, run)?;
    let seed = cfg.seed()?;
    let (sigma, _) = cfg.sigma_eps()?;
    let (tc, init, name) = match mode {
        Mode::Mse => {
            let base = cfg.get("base", DEFAULT_BASE)?;
            if base == 0 {
                return Err(CliError::Usage("base: must be positive".into()));
            }
            (train_config(cfg, TrainConfig::mse_only(sigma, seed))?, DenoiserModel::with_base(seed, base), "mse")
        }
        Mode::Composite => {
            let p = run.input(cfg.input("init", "denoiser_mse.ctiq")?);
            (train_config(cfg, TrainConfig::composite(sigma, seed))?, DenoiserModel::load(&p)?, "composite")
        }
    };
    tc.validate()?;
    let outcome = training::train_denoiser(&init, &metric, &data, &tc)?;
    run.save_model(&format!("denoiser_{name}.ctiq"), &outcome.model)?;
    run.write(&format!("history_{name}.csv"), training::history_csv(&outcome.history).as_bytes())
}

pub fn certify(cfg: &RunConfig, run: &mut Run) -> Result<(), CliError> {
    let defense_name: String = cfg.get("defense", "ms".to_string())?;
    let defense = Defense::parse(&defense_name)
        .filter(|d| *d != Defense::None)
        .ok_or_else(|| CliError::Usage(format!("defense: expected ms, dms or dms_iqa, got {defense_name:?}")))?;
    let (sigma, eps) = cfg.sigma_eps()?;
    let sc = cfg.smoothing(sigma, eps, 2000)?;
    check_feasible(&sc)?;
    let data = load_dataset(cfg, run)?;
    let metric = load_metric(cfg, run)?;
    let denoiser = match denoiser_key(defense) {
        Some(k) => Some(load_denoiser(cfg, run, k)?),
        None => None,
    };
    let items = select(cfg, &data, "test", None)?;
    let records: Vec<CertRecord> = items
        .iter()
        .map(|&(id, it)| Ok(CertRecord::new(id, &sc, &smoothing::smooth(&metric, &it.image, &sc, denoiser.as_ref())?)))
        .collect::<Result<_, certiqa::Error>>()?;
    run.write_json("certify.json", &records)
}

pub fn attack(cfg: &RunConfig, run: &mut Run) -> Result<(), CliError> {
    let (sigma, eps) = cfg.sigma_eps()?;
    let sc = cfg.smoothing(sigma, eps, 2000)?;
    check_feasible(&sc)?;
    let seed = cfg.seed()?;
    let attack_eps = cfg.get("attack_eps", eps)?;
    let mut ac = AttackConfig::new(attack_eps, seed).map_err(CliError::from_core)?;
    ac.steps = cfg.get("attack_steps", ac.steps)?;
    ac.lr = cfg.get("attack_lr", ac.lr)?;
    let data = load_dataset(cfg, run)?;
    let metric = load_metric(cfg, run)?;
    let dms = load_denoiser(cfg, run, "dms")?;
    let dms_iqa = load_denoiser(cfg, run, "dms_iqa")?;
    let items = select(cfg, &data, "all", Some(100))?;
    let clean: Vec<Tensor> = items.iter().map(|(_, it)| it.image.clone()).collect();
    let attacks = attack::attack_all(&metric, &clean, &ac)?;
    let denoisers = Denoisers { dms: &dms, dms_iqa: &dms_iqa };
    let mut records = Vec::new();
    let mut csv = String::from(
        "defense,eps,images,mean_adv_gain,mean_abs_adv_gain,mean_cd_l,mean_cd_u,within_clean_interval,within_own_interval\n",
    );
    for defense in Defense::ALL {
        let (mut recs, s) = attack::evaluate_under_attack(&metric, defense, denoisers.for_defense(defense), &clean, &attacks, attack_eps, &sc)?;
        for (r, (id, _)) in recs.iter_mut().zip(&items) {
            r.image_id = *id;
        }
        csv.push_str(&format!(
            "{},{},{},{:.8},{:.8},{},{},{},{}\n",
            defense.name(),
            attack_eps,
            s.images,
            s.mean_adv_gain,
            s.mean_abs_adv_gain,
            fmt_ext(s.mean_cd_l),
            fmt_ext(s.mean_cd_u),
            s.within_clean_interval,
            s.within_own_interval
        ));
        records.extend(recs);
    }
    run.write_json("attack_records.json", &records)?;
    run.write("attack_summary.csv", csv.as_bytes())
}

fn fmt_ext(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.8}")
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

pub fn eval_compare(cfg: &RunConfig, run: &mut Run) -> Result<(), CliError> {
    cfg.seed()?;
    let presets: Vec<(String, SmoothingConfig)> = if cfg.has("preset") || cfg.has("sigma") || cfg.has("eps") {
        let (sigma, eps) = cfg.sigma_eps()?;
        let name: String = cfg.get("preset", "strong".to_string())?;
        vec![(name, cfg.smoothing(sigma, eps, 2000)?)]
    } else {
        cfg.list::<String>("presets", "weak,strong")?
            .into_iter()
            .map(|name| {
                let p = Preset::parse(&name).ok_or_else(|| CliError::Usage(format!("presets: unknown preset {name:?}")))?;
                let (sigma, eps) = p.params();
                Ok((name, cfg.smoothing(sigma, eps, 2000)?))
            })
            .collect::<Result<_, CliError>>()?
    };
    for (_, sc) in &presets {
        check_feasible(sc)?;
    }
    let data = load_dataset(cfg, run)?;
    let metric = load_metric(cfg, run)?;
    let dms = load_denoiser(cfg, run, "dms")?;
    let dms_iqa = load_denoiser(cfg, run, "dms_iqa")?;
    let items: Vec<LabeledImage> = select(cfg, &data, "test", None)?.into_iter().map(|(_, it)| it.clone()).collect();
    let c = compare_methods(&metric, Denoisers { dms: &dms, dms_iqa: &dms_iqa }, &items, &presets)?;
    run.write("compare.csv", c.to_csv().as_bytes())?;
    run.write("compare.txt", c.to_text().as_bytes())?;
    run.write_json("compare.json", &c)
}

pub fn optimize(cfg: &RunConfig, run: &mut Run) -> Result<(), CliError> {
    let backend_name: String = cfg.get("backend", "dms_iqa".to_string())?;
    let backend = Defense::parse(&backend_name)
        .ok_or_else(|| CliError::Usage(format!("backend: expected none, ms, dms or dms_iqa, got {backend_name:?}")))?;
    let seed = cfg.seed()?;
    let mut oc = OptConfig::new(backend, cfg.get("sigma", 0.12)?, seed);
    oc.steps = cfg.get("steps", oc.steps)?;
    oc.lr = cfg.get("lr", oc.lr)?;
    oc.n_samples = cfg.get("n", oc.n_samples)?;
    oc.quality_weight = cfg.get("quality_weight", oc.quality_weight)?;
    oc.log_every = cfg.get("log_every", oc.log_every)?;
    let input_noise: f64 = cfg.get("input_noise", 0.1)?;
    if !(input_noise >= 0.0) {
        return Err(CliError::Usage("input_noise: must be non-negative".into()));
    }
    let data = load_dataset(cfg, run)?;
    let metric = load_metric(cfg, run)?;
    let denoiser = match denoiser_key(backend) {
        Some(k) => Some(load_denoiser(cfg, run, k)?),
        None => None,
    };
    let items = select(cfg, &data, "test", Some(20))?;
    let outcomes: Vec<_> = items
        .par_iter()
        .map(|&(id, it)| {
            let x_noisy = noisy_input(&it.image, input_noise, seed, id);
            metric_opt::optimize_image(&x_noisy, &it.image, &metric, denoiser.as_ref(), &oc).map(|o| (x_noisy, o))
        })
        .collect::<Result<_, _>>()?;
    let mut traj = String::from("image_id,step,loss,q_value,rmse_vs_clean\n");
    let mut summary = String::from("image_id,start_rmse,final_rmse,min_pixel,max_pixel\n");
    let mut finals = Dataset::default();
    let mut total = (0.0, 0.0);
    for (&(id, it), (_, o)) in items.iter().zip(&outcomes) {
        for line in metric_opt::trajectory_csv(&o.trajectory).lines().skip(1) {
            traj.push_str(&format!("{id},{line}\n"));
        }
        let start = o.trajectory[0].rmse_vs_clean;
        let fin = rmse(&o.y_final, &it.image);
        total.0 += start;
        total.1 += fin;
        summary.push_str(&format!("{id},{start:.10},{fin:.10},{:.6},{:.6}\n", o.pixel_extent.0, o.pixel_extent.1));
        finals.items.push(LabeledImage { image: o.y_final.clone(), ..it.clone() });
    }
    let k = items.len() as f64;
    summary.push_str(&format!("mean,{:.10},{:.10},,\n", total.0 / k, total.1 / k));
    let stem = format!("optimize_{}", backend.name());
    run.write(&format!("{stem}_trajectory.csv"), traj.as_bytes())?;
    run.write(&format!("{stem}_summary.csv"), summary.as_bytes())?;
    run.write(&format!("{stem}.ctds"), &finals.encode())
}

/// `clamp01(x + r)` with `r ~ N(0, level² I)` drawn from a stream of its own.
pub fn noisy_input(x: &Tensor, level: f64, seed: u64, image_id: usize) -> Tensor {
    let r = smoothing::noise(x.shape(), level, seed ^ 0x6f70_7469_6d69_7a65, image_id as u64);
    x.zip_map(&r, "noisy_input", |a, b| a + b).expect("same shape").clamp01()
}

pub fn rmse(a: &Tensor, b: &Tensor) -> f64 {
    let d = a.zip_map(b, "rmse", |x, y| (x - y) * (x - y)).expect("same shape");
    (d.sum() / d.len() as f64).sqrt()
}

pub fn sweep(cfg: &RunConfig, run: &mut Run, grid: Grid) -> Result<(), CliError> {
    let (sigma, eps) = cfg.sigma_eps()?;
    let seed = cfg.seed()?;
    let data = load_dataset(cfg, run)?;
    let metric = load_metric(cfg, run)?;
    let dms = load_denoiser(cfg, run, "dms")?;
    match grid {
        Grid::Loss | Grid::Batch => {
            let sc = cfg.smoothing(sigma, eps, 2000)?;
            check_feasible(&sc)?;
            let mut base = TrainConfig::composite(sigma, seed);
            base.epochs = 10;
            let base = train_config(cfg, base)?;
            if grid == Grid::Loss {
                let crs: Vec<f64> = cfg.list("c_r_values", "1,10")?;
                let cts: Vec<f64> = cfg.list("c_t_values", "100,1000")?;
                let cells: Vec<LossWeights> = crs.iter().flat_map(|&c_r| cts.iter().map(move |&c_t| LossWeights { c_r, c_t })).collect();
                if cells.iter().any(|w| !(w.c_r >= 0.0 && w.c_t >= 0.0)) {
                    return Err(CliError::Usage("c_r_values: coefficients must be non-negative".into()));
                }
                let rows = sweep::loss_sweep(&metric, &dms, &data, &base, &cells, &sc)?;
                run.write("sweep_loss.csv", sweep::loss_sweep_csv(&rows).as_bytes())
            } else {
                let sizes: Vec<usize> = cfg.list("batch_values", "3,5,15")?;
                if sizes.iter().any(|&b| b < 2) {
                    return Err(CliError::Usage("batch_values: composite training needs batches of at least 2".into()));
                }
                let rows = sweep::batch_sweep(&metric, &dms, &data, &base, &sizes, &sc)?;
                run.write("sweep_batch.csv", sweep::batch_sweep_csv(&rows).as_bytes())
            }
        }
        Grid::EpsSigma => {
            let sigmas: Vec<f64> = cfg.list("sigma_values", "0.12,0.18,0.24")?;
            let epsilons: Vec<f64> = cfg.list("eps_values", "0.06,0.12,0.24,0.36")?;
            let n = cfg.get("n", 2000)?;
            for &s in &sigmas {
                SmoothingConfig::new(s, 0.0, n, seed).map_err(|e| CliError::Usage(format!("sigma_values: {e}")))?;
            }
            let dms_iqa = load_denoiser(cfg, run, "dms_iqa")?;
            let items: Vec<LabeledImage> = select(cfg, &data, "test", None)?.into_iter().map(|(_, it)| it.clone()).collect();
            let rows = eps_sigma_sweep(&metric, Denoisers { dms: &dms, dms_iqa: &dms_iqa }, &items, &sigmas, &epsilons, n, seed)?;
            run.write("sweep_eps_sigma.csv", sweep::eps_sigma_csv(&rows).as_bytes())
        }
    }
}
