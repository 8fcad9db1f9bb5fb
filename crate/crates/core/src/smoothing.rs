//! Median smoothing with percentile certificates, plus the mean-smoothing
//! baseline.
//!
//! Index conventions (1-based order statistics over `N` ascending samples):
//! lower `max(1, floor(p_lo N))`, median `ceil(N / 2)`, upper `ceil(p_hi N)`,
//! with `p_lo = Φ(-ε/σ)` and `p_hi = Φ(ε/σ)`. A configuration is feasible
//! when `ceil(p_hi N) < N`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{DenoiserModel, Scorer};
use crate::normal;
use crate::tensor::Tensor;

/// Number of noisy copies pushed through the networks at once.
pub const CHUNK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothingConfig {
    pub sigma: f64,
    pub epsilon: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// One-sided miss probability for binomially adjusted indices; `None`
    /// uses the plain empirical percentiles.
    pub confidence_alpha: Option<f64>,
}

/// 1-based order-statistic positions used by [`certify`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OrderIndices {
    pub lower: usize,
    pub median: usize,
    pub upper: usize,
}

impl SmoothingConfig {
    pub fn new(sigma: f64, epsilon: f64, n_samples: usize, seed: u64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::config("sigma", format!("must be positive, got {sigma}")));
        }
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::config("epsilon", format!("must be non-negative, got {epsilon}")));
        }
        if n_samples < 2 {
            return Err(Error::config("n", format!("need at least 2 samples, got {n_samples}")));
        }
        Ok(SmoothingConfig {
            sigma,
            epsilon,
            n_samples,
            seed,
            confidence_alpha: None,
        })
    }

    pub fn with_confidence(mut self, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 0.5) {
            return Err(Error::config("confidence", format!("miss probability must lie in (0, 0.5), got {alpha}")));
        }
        self.confidence_alpha = Some(alpha);
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn p_lower(&self) -> f64 {
        normal::cdf(-self.epsilon / self.sigma)
    }

    pub fn p_upper(&self) -> f64 {
        normal::cdf(self.epsilon / self.sigma)
    }

    fn infeasible(&self, reason: String) -> Error {
        Error::Infeasible {
            reason,
            sigma: self.sigma,
            epsilon: self.epsilon,
            n: self.n_samples,
            min_samples: self.min_feasible_samples(),
        }
    }

    fn min_feasible_samples(&self) -> usize {
        let mut n = min_samples(self.epsilon / self.sigma).max(2);
        if self.confidence_alpha.is_some() {
            let mut probe = *self;
            while n < 10_000_000 {
                probe.n_samples = n;
                if probe.indices().is_ok() {
                    break;
                }
                n = n + n / 8 + 1;
            }
        }
        n
    }

    /// Order-statistic indices, or an infeasibility error.
    pub fn indices(&self) -> Result<OrderIndices> {
        let n = self.n_samples;
        let nf = n as f64;
        let median = n.div_ceil(2);
        let (lower, upper) = match self.confidence_alpha {
            None => {
                let lower = ((self.p_lower() * nf).floor() as usize).max(1);
                let upper = (self.p_upper() * nf).ceil() as usize;
                (lower, upper)
            }
            Some(alpha) => {
                // Lower: largest k with P(Bin(N, p_lo) <= k-1) <= alpha, so that
                // X_(k) sits below the p_lo quantile with probability >= 1-alpha.
                let p_lo = self.p_lower();
                let lower = (1..=n)
                    .take_while(|&k| normal::binomial_cdf(k as u64 - 1, n as u64, p_lo) <= alpha)
                    .last()
                    .ok_or_else(|| self.infeasible("no lower order statistic reaches the requested confidence".into()))?;
                // Upper: smallest k with P(Bin(N, p_hi) <= k-1) >= 1-alpha.
                let p_hi = self.p_upper();
                let upper = (1..=n)
                    .find(|&k| normal::binomial_cdf(k as u64 - 1, n as u64, p_hi) >= 1.0 - alpha)
                    .unwrap_or(n + 1);
                (lower, upper)
            }
        };
        if upper >= n {
            return Err(self.infeasible(format!("upper order statistic index {upper} is not below N={n}")));
        }
        Ok(OrderIndices {
            lower: lower.min(median),
            median,
            upper: upper.max(median),
        })
    }
}

/// Named (σ, ε) pairs for the two standard use cases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Weak,
    Strong,
}

impl Preset {
    pub const ALL: [Preset; 2] = [Preset::Weak, Preset::Strong];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Weak => "weak",
            Preset::Strong => "strong",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    /// `(sigma, epsilon)`.
    pub fn params(self) -> (f64, f64) {
        match self {
            Preset::Weak => (0.12, 0.06),
            Preset::Strong => (0.18, 0.36),
        }
    }

    pub fn config(self, n_samples: usize, seed: u64) -> Result<SmoothingConfig> {
        let (sigma, epsilon) = self.params();
        SmoothingConfig::new(sigma, epsilon, n_samples, seed)
    }
}

/// Largest ε/σ that keeps `ceil(Φ(ε/σ) N) < N`.
pub fn max_ratio(n: usize) -> f64 {
    assert!(n >= 2, "max_ratio needs N >= 2");
    normal::inverse_cdf((n as f64 - 1.0) / n as f64).expect("p in (0, 1)")
}

/// Smallest N with `ceil(Φ(ratio) N) < N`.
pub fn min_samples(ratio: f64) -> usize {
    let p = normal::cdf(ratio);
    if p >= 1.0 {
        return usize::MAX;
    }
    // ceil(pN) < N  <=>  pN <= N - 1  <=>  N >= 1/(1-p); scan from just below.
    let mut n = ((1.0 / (1.0 - p)).floor() as usize).saturating_sub(2).max(1);
    while ((p * n as f64).ceil() as usize) >= n {
        n += 1;
    }
    n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertifiedScore {
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
    /// `100 (upper - lower) / range`.
    pub cd_pct: f64,
    #[serde(skip)]
    pub samples: Option<Vec<f64>>,
}

/// A scorer built from a per-image closure.
pub struct FnScorer<F> {
    f: F,
    range: f64,
}

impl<F: Fn(&Tensor) -> f64 + Sync> FnScorer<F> {
    pub fn new(f: F, range: f64) -> Self {
        FnScorer { f, range }
    }
}

impl<F: Fn(&Tensor) -> f64 + Sync> Scorer for FnScorer<F> {
    fn score_batch(&self, batch: &Tensor) -> Result<Vec<f64>> {
        Ok((0..batch.shape()[0]).map(|i| (self.f)(&batch.index0(i))).collect())
    }

    fn score_range(&self) -> f64 {
        self.range
    }
}

/// Gaussian draw `r_i ~ N(0, σ² I)` for sample index `i`, from its own
/// substream of `seed`.
pub fn noise(shape: &[usize], sigma: f64, seed: u64, index: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("noise shape")
}

/// Noisy copies `x + r_i` for `i` in `start..start + count`, stacked into a batch.
pub fn noisy_batch(x: &Tensor, sigma: f64, seed: u64, start: usize, count: usize) -> Tensor {
    let per = x.len();
    let mut data = Vec::with_capacity(per * count);
    for i in start..start + count {
        let r = noise(x.shape(), sigma, seed, i as u64);
        data.extend(x.data().iter().zip(r.data()).map(|(a, b)| a + b));
    }
    let mut shape = vec![count];
    shape.extend_from_slice(x.shape());
    Tensor::new(shape, data).expect("batch shape")
}

/// Scores of `D(x + r_i)` (or `x + r_i` without a denoiser) for all
/// `i < n_samples`, unsorted and in sample-index order. Independent of the
/// size of the rayon pool.
pub fn raw_scores(scorer: &dyn Scorer, x: &Tensor, cfg: &SmoothingConfig, denoiser: Option<&DenoiserModel>) -> Result<Vec<f64>> {
    let chunks: Vec<usize> = (0..cfg.n_samples).step_by(CHUNK).collect();
    let parts: Vec<Vec<f64>> = chunks
        .par_iter()
        .map(|&start| {
            let count = CHUNK.min(cfg.n_samples - start);
            let batch = noisy_batch(x, cfg.sigma, cfg.seed, start, count);
            let batch = match denoiser {
                Some(d) => d.denoise_batch(&batch)?,
                None => batch,
            };
            scorer.score_batch(&batch)
        })
        .collect::<Result<_>>()?;
    Ok(parts.concat())
}

/// Ascending sample scores for median smoothing.
pub fn sample_scores(scorer: &dyn Scorer, x: &Tensor, cfg: &SmoothingConfig, denoiser: Option<&DenoiserModel>) -> Result<Vec<f64>> {
    let mut s = raw_scores(scorer, x, cfg, denoiser)?;
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Reads the certified interval off ascending samples.
pub fn certify(samples_sorted: &[f64], cfg: &SmoothingConfig, range: f64) -> Result<CertifiedScore> {
    if samples_sorted.len() != cfg.n_samples {
        return Err(Error::dim("certify", "samples", cfg.n_samples, samples_sorted.len()));
    }
    let idx = cfg.indices()?;
    let at = |k: usize| samples_sorted[k - 1];
    let (lower, median, upper) = (at(idx.lower), at(idx.median), at(idx.upper));
    Ok(CertifiedScore {
        median,
        lower,
        upper,
        cd_pct: 100.0 * (upper - lower) / range,
        samples: None,
    })
}

/// Samples and certifies in one go.
pub fn smooth(scorer: &dyn Scorer, x: &Tensor, cfg: &SmoothingConfig, denoiser: Option<&DenoiserModel>) -> Result<CertifiedScore> {
    cfg.indices()?;
    let s = sample_scores(scorer, x, cfg, denoiser)?;
    certify(&s, cfg, scorer.score_range())
}

/// Arithmetic mean of the same sample set; uncertified.
pub fn mean_smooth(scorer: &dyn Scorer, x: &Tensor, cfg: &SmoothingConfig, denoiser: Option<&DenoiserModel>) -> Result<f64> {
    let s = raw_scores(scorer, x, cfg, denoiser)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// One serialized certification result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertRecord {
    pub image_id: usize,
    pub sigma: f64,
    pub epsilon: f64,
    pub n: usize,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
    pub cd_pct: f64,
    pub seed: u64,
}

impl CertRecord {
    pub fn new(image_id: usize, cfg: &SmoothingConfig, c: &CertifiedScore) -> Self {
        CertRecord {
            image_id,
            sigma: cfg.sigma,
            epsilon: cfg.epsilon,
            n: cfg.n_samples,
            median: c.median,
            lower: c.lower,
            upper: c.upper,
            cd_pct: c.cd_pct,
            seed: cfg.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LinearScorer;

    fn cfg(sigma: f64, eps: f64, n: usize) -> SmoothingConfig {
        SmoothingConfig::new(sigma, eps, n, 17).unwrap()
    }

    #[test]
    fn strong_preset_indices() {
        let c = cfg(0.18, 0.36, 2000);
        assert_eq!(
            c.indices().unwrap(),
            OrderIndices {
                lower: 45,
                median: 1000,
                upper: 1955
            }
        );
        let samples: Vec<f64> = (1..=2000).map(f64::from).collect();
        let cert = certify(&samples, &c, 100.0).unwrap();
        assert_eq!((cert.lower, cert.median, cert.upper), (45.0, 1000.0, 1955.0));
        // 100 * (1955 - 45) / 100
        assert!((cert.cd_pct - 1910.0).abs() < 1e-9);
    }

    #[test]
    fn zero_radius_collapses() {
        let i = cfg(0.18, 0.0, 2000).indices().unwrap();
        assert_eq!((i.lower, i.median, i.upper), (1000, 1000, 1000));
    }

    #[test]
    fn max_ratio_and_min_samples() {
        let r = max_ratio(2000);
        assert!((r - 3.2905).abs() < 1e-4, "{r}");
        assert!(min_samples(0.5) <= 4);
        let m: Vec<usize> = [0.5, 1.0, 2.0, 3.0].iter().map(|&r| min_samples(r)).collect();
        assert!(m.windows(2).all(|w| w[0] <= w[1]), "{m:?}");
        for &ratio in &[0.5, 1.0, 2.0, 3.0] {
            let n = min_samples(ratio);
            let p = normal::cdf(ratio);
            assert!(((p * n as f64).ceil() as usize) < n);
            assert!(n <= 2 || ((p * (n - 1) as f64).ceil() as usize) >= n - 1);
        }
    }

    #[test]
    fn infeasible_reports_needed_samples() {
        let e = cfg(0.1, 0.4, 100).indices().unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("at least"), "{msg}");
        match e {
            Error::Infeasible { min_samples: m, .. } => assert_eq!(m, min_samples(4.0)),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn constant_scorer_gives_constant_samples() {
        let f = FnScorer::new(|_: &Tensor| 42.0, 100.0);
        let x = Tensor::full(&[3, 4, 4], 0.5);
        let s = sample_scores(&f, &x, &cfg(0.2, 0.1, 300), None).unwrap();
        assert!(s.iter().all(|&v| v == 42.0));
        assert_eq!(mean_smooth(&f, &x, &cfg(0.2, 0.1, 300), None).unwrap(), 42.0);
    }

    #[test]
    fn vanishing_noise() {
        let w = Tensor::new(vec![3, 2, 2], (0..12).map(|i| i as f64 / 10.0 - 0.5).collect()).unwrap();
        let lin = LinearScorer::new(w, 3.0, 100.0);
        let x = Tensor::full(&[3, 2, 2], 0.3);
        let base = lin.score(&x).unwrap();
        let s = sample_scores(&lin, &x, &cfg(1e-9, 0.0, 200), None).unwrap();
        assert!(s.iter().all(|v| (v - base).abs() < 1e-4));
    }

    #[test]
    fn linear_sample_spread_matches_gaussian_propagation() {
        let w = Tensor::new(vec![3, 4, 4], (0..48).map(|i| ((i * 7) % 11) as f64 - 5.0).collect()).unwrap();
        let wn = w.l2_norm();
        let lin = LinearScorer::new(w, 0.0, 100.0);
        let x = Tensor::full(&[3, 4, 4], 0.5);
        let c = cfg(0.12, 0.06, 2000);
        let s = raw_scores(&lin, &x, &c, None).unwrap();
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let sd = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s.len() - 1) as f64).sqrt();
        assert!((sd / (0.12 * wn) - 1.0).abs() < 0.1, "sd {sd} vs {}", 0.12 * wn);
        let target = lin.score(&x).unwrap();
        assert!((mean - target).abs() <= 3.0 * 0.12 * wn / (2000f64).sqrt());
    }

    #[test]
    fn samples_independent_of_pool_size() {
        let w = Tensor::new(vec![3, 2, 2], (0..12).map(|i| i as f64).collect()).unwrap();
        let lin = LinearScorer::new(w, 0.0, 100.0);
        let x = Tensor::full(&[3, 2, 2], 0.5);
        let c = cfg(0.3, 0.1, 500);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| sample_scores(&lin, &x, &c, None)).unwrap();
        let b = four.install(|| sample_scores(&lin, &x, &c, None)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn confidence_widens_interval() {
        let plain = cfg(0.18, 0.18, 2000);
        let conf = plain.with_confidence(0.001).unwrap();
        let (a, b) = (plain.indices().unwrap(), conf.indices().unwrap());
        assert!(b.lower < a.lower && b.upper > a.upper, "{a:?} {b:?}");
        // Independent check of the lower rule by direct summation.
        let p = plain.p_lower();
        let tail = |k: usize| normal::binomial_cdf(k as u64 - 1, 2000, p);
        assert!(tail(b.lower) <= 0.001 && tail(b.lower + 1) > 0.001);
    }

    #[test]
    fn median_ignores_extreme_top_values() {
        let c = cfg(0.18, 0.36, 2000);
        let mut s: Vec<f64> = (1..=2000).map(f64::from).collect();
        let before = certify(&s, &c, 100.0).unwrap();
        for v in s.iter_mut().rev().take(20) {
            *v = f64::INFINITY;
        }
        let after = certify(&s, &c, 100.0).unwrap();
        assert_eq!((before.median, before.lower), (after.median, after.lower));
    }
}
