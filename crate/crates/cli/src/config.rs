//! Key-value run configuration: a plain-text file, overridden by `--set`
//! pairs, overridden by dedicated flags.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use certiqa::smoothing::{Preset, SmoothingConfig};

use crate::CliError;

/// Every key the subcommands understand.
pub const KEYS: &[&str] = &[
    "seed", "out", "workers", "preset", "presets", "sigma", "eps", "n", "confidence", "dataset", "metric", "dms",
    "dms_iqa", "init", "count", "height", "width", "mos_noise", "epochs", "lr", "batch", "c_r", "c_t", "base",
    "split", "images", "defense", "attack_eps", "attack_steps", "attack_lr", "backend", "steps", "input_noise",
    "quality_weight", "log_every", "c_r_values", "c_t_values", "batch_values", "sigma_values", "eps_values",
];

#[derive(Debug, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    /// Every value a subcommand actually consumed, defaults included.
    resolved: RefCell<BTreeMap<String, String>>,
}

impl RunConfig {
    pub fn parse_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("config: cannot read {}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config: {}:{}: expected key = value", path.display(), i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if !KEYS.contains(&key) {
            return Err(CliError::Usage(format!("{key}: unknown configuration key")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set {pair}: expected key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn has(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    fn record(&self, key: &str, value: impl Display) {
        self.resolved.borrow_mut().insert(key.to_string(), value.to_string());
    }

    pub fn resolved(&self) -> BTreeMap<String, String> {
        self.resolved.borrow().clone()
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => {
                let v = raw.parse().map_err(|e| CliError::Usage(format!("{key}: cannot parse {raw:?}: {e}")))?;
                self.record(key, raw);
                Ok(Some(v))
            }
        }
    }

    pub fn get<T: FromStr + Display>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        match self.opt(key)? {
            Some(v) => Ok(v),
            None => {
                self.record(key, &default);
                Ok(default)
            }
        }
    }

    pub fn list<T: FromStr>(&self, key: &str, default: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: Display,
    {
        let raw = self.values.get(key).map_or(default, String::as_str);
        self.record(key, raw);
        raw.split(',')
            .map(|s| s.trim().parse().map_err(|e| CliError::Usage(format!("{key}: cannot parse {s:?}: {e}"))))
            .collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out", "out".to_string()).expect("string parse is infallible"))
    }

    /// Input path: an explicit value, or the default file name inside the
    /// output directory. Must exist.
    pub fn input(&self, key: &str, default_name: &str) -> Result<PathBuf, CliError> {
        let p = match self.opt::<String>(key)? {
            Some(s) => PathBuf::from(s),
            None => {
                let p = self.out_dir().join(default_name);
                self.record(key, p.display());
                p
            }
        };
        if !p.is_file() {
            return Err(CliError::Usage(format!("{key}: input file {} does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.get("seed", 0u64)
    }

    /// `(sigma, epsilon)` from the preset with explicit overrides.
    pub fn sigma_eps(&self) -> Result<(f64, f64), CliError> {
        let preset: String = self.get("preset", "strong".to_string())?;
        let (sigma, eps) = match preset.as_str() {
            "custom" => {
                let s = self.opt("sigma")?.ok_or_else(|| CliError::Usage("sigma: required with preset custom".into()))?;
                let e = self.opt("eps")?.ok_or_else(|| CliError::Usage("eps: required with preset custom".into()))?;
                (s, e)
            }
            name => {
                let p = Preset::parse(name)
                    .ok_or_else(|| CliError::Usage(format!("preset: expected weak, strong or custom, got {name:?}")))?;
                let (s, e) = p.params();
                (self.get("sigma", s)?, self.get("eps", e)?)
            }
        };
        Ok((sigma, eps))
    }

    /// Smoothing parameters for certification; `n_default` differs between
    /// certification (2000) and pixel optimization (100).
    pub fn smoothing(&self, sigma: f64, eps: f64, n_default: usize) -> Result<SmoothingConfig, CliError> {
        let n = self.get("n", n_default)?;
        let cfg = SmoothingConfig::new(sigma, eps, n, self.seed()?).map_err(CliError::from_core)?;
        match self.opt::<f64>("confidence")? {
            Some(a) => cfg.with_confidence(a).map_err(CliError::from_core),
            None => Ok(cfg),
        }
    }
}
