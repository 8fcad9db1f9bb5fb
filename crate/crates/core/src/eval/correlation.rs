//! Rank and linear correlation, τ-closeness and the pairwise rank-error bound.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 1-based ranks, ties sharing the average of the positions they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::dim("correlation", "length", x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(Error::Correlation("need at least 3 paired values"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Correlation("non-finite value"));
    }
    Ok(())
}

/// Pearson linear correlation.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Correlation("zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson of average ranks.
pub fn srocc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    plcc(&average_ranks(x), &average_ranks(y))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauCloseness {
    pub tau_srocc: f64,
    pub tau_plcc: f64,
}

/// Absolute correlation drops `|ρ(X₁, Y) − ρ(X₂, Y)|` for both coefficients.
pub fn tau_closeness(metric_scores: &[f64], defended_scores: &[f64], mos: &[f64]) -> Result<TauCloseness> {
    Ok(TauCloseness {
        tau_srocc: (srocc(metric_scores, mos)? - srocc(defended_scores, mos)?).abs(),
        tau_plcc: (plcc(metric_scores, mos)? - plcc(defended_scores, mos)?).abs(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankErrorCertificate {
    /// `max_i |a_i − b_i|`.
    pub delta_inf: f64,
    /// Number of unordered pairs whose undefended gap `|b_i − b_j|` is at
    /// most `delta_inf`: the index of the first sorted gap exceeding it,
    /// minus one.
    pub t_bound: usize,
    /// Number of unordered pairs whose gap is below `2 delta_inf`. A pair
    /// can only swap order if both scores move toward each other, which
    /// needs a gap below twice the deviation.
    pub t_bound_sound: usize,
    pub observed_errors: usize,
    pub m: usize,
}

/// Pairwise ranking-error bound for defended scores `a` against undefended
/// scores `b`, with the brute-force count of discordant pairs.
pub fn rank_error_certificate(a: &[f64], b: &[f64]) -> Result<RankErrorCertificate> {
    if a.len() != b.len() {
        return Err(Error::dim("rank_error_certificate", "length", b.len(), a.len()));
    }
    let m = a.len();
    if m < 2 {
        return Err(Error::Correlation("need at least 2 paired values"));
    }
    let delta = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let mut gaps: Vec<f64> = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            gaps.push((b[i] - b[j]).abs());
        }
    }
    gaps.sort_by(f64::total_cmp);
    let t_bound = gaps.partition_point(|&g| g <= delta);
    let t_bound_sound = gaps.partition_point(|&g| g < 2.0 * delta);
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let mut observed = 0;
    for i in 0..m {
        for j in i + 1..m {
            if (ra[i] - ra[j]) * (rb[i] - rb[j]) < 0.0 {
                observed += 1;
            }
        }
    }
    Ok(RankErrorCertificate {
        delta_inf: delta,
        t_bound,
        t_bound_sound,
        observed_errors: observed,
        m,
    })
}
