//! Stratified bootstrap confidence intervals.
//!
//! Items are resampled with replacement inside each stratum (one stratum
//! per task), the statistic is recomputed on every resample, and the
//! percentile interval of the resampled statistics is returned. Each
//! resample draws from its own RNG stream derived from the master seed, so
//! results do not depend on thread scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BootstrapError {
    #[error("no strata")]
    NoStrata,
    #[error("stratum {0} is empty")]
    EmptyStratum(usize),
    #[error("confidence {0} must lie in (0, 1)")]
    BadConfidence(f64),
    #[error("n_resamples must be positive")]
    NoResamples,
    #[error("statistic returned a non-finite value")]
    NonFiniteStatistic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapConfig {
    pub n_resamples: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            n_resamples: 10_000,
            confidence: 0.95,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceInterval {
    pub point: f64,
    pub low: f64,
    pub high: f64,
}

impl ConfidenceInterval {
    pub fn width(&self) -> f64 {
        self.high - self.low
    }

    pub fn contains(&self, x: f64) -> bool {
        self.low <= x && x <= self.high
    }

    pub fn overlaps(&self, other: &ConfidenceInterval) -> bool {
        self.low <= other.high && other.low <= self.high
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the `index`-th resample for a master seed.
pub(crate) fn resample_seed(master: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master) ^ index)
}

/// Percentile-interval bootstrap of `statistic`, resampling within strata.
/// The statistic receives the resampled strata as borrowed items.
pub fn stratified_bootstrap_ci<T, F>(
    strata: &[Vec<T>],
    statistic: F,
    config: &BootstrapConfig,
) -> Result<ConfidenceInterval, BootstrapError>
where
    T: Sync,
    F: Fn(&[Vec<&T>]) -> f64 + Sync,
{
    let cis = stratified_bootstrap_cis(strata, |s| vec![statistic(s)], config)?;
    Ok(cis[0])
}

/// Like [`stratified_bootstrap_ci`] for a statistic with several
/// components; all components share the same resamples.
pub fn stratified_bootstrap_cis<T, F>(
    strata: &[Vec<T>],
    statistic: F,
    config: &BootstrapConfig,
) -> Result<Vec<ConfidenceInterval>, BootstrapError>
where
    T: Sync,
    F: Fn(&[Vec<&T>]) -> Vec<f64> + Sync,
{
    if strata.is_empty() {
        return Err(BootstrapError::NoStrata);
    }
    if let Some(i) = strata.iter().position(Vec::is_empty) {
        return Err(BootstrapError::EmptyStratum(i));
    }
    if !(config.confidence > 0.0 && config.confidence < 1.0) {
        return Err(BootstrapError::BadConfidence(config.confidence));
    }
    if config.n_resamples == 0 {
        return Err(BootstrapError::NoResamples);
    }

    let original: Vec<Vec<&T>> = strata.iter().map(|s| s.iter().collect()).collect();
    let point = statistic(&original);
    if point.iter().any(|p| !p.is_finite()) {
        return Err(BootstrapError::NonFiniteStatistic);
    }

    let samples: Vec<Vec<f64>> = (0..config.n_resamples as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(resample_seed(config.seed, i));
            let resample: Vec<Vec<&T>> = strata
                .iter()
                .map(|s| (0..s.len()).map(|_| &s[rng.random_range(0..s.len())]).collect())
                .collect();
            statistic(&resample)
        })
        .collect();
    let alpha = (1.0 - config.confidence) / 2.0;
    let mut out = Vec::with_capacity(point.len());
    for (k, &p) in point.iter().enumerate() {
        let mut stats: Vec<f64> = samples.iter().map(|s| s[k]).collect();
        if stats.iter().any(|s| !s.is_finite()) {
            return Err(BootstrapError::NonFiniteStatistic);
        }
        stats.sort_by(f64::total_cmp);
        out.push(ConfidenceInterval {
            point: p,
            low: quantile_sorted(&stats, alpha),
            high: quantile_sorted(&stats, 1.0 - alpha),
        });
    }
    Ok(out)
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Mean over all items of all strata.
pub fn pooled_mean(strata: &[Vec<&f64>]) -> f64 {
    let (sum, n) = strata
        .iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), &&x| (s + x, n + 1));
    sum / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize) -> BootstrapConfig {
        BootstrapConfig {
            n_resamples: n,
            confidence: 0.95,
            seed: 7,
        }
    }

    #[test]
    fn degenerate_data_gives_zero_width() {
        let strata = vec![vec![0.5; 4], vec![0.5; 3]];
        let ci = stratified_bootstrap_ci(&strata, pooled_mean, &cfg(500)).unwrap();
        assert_eq!(ci.width(), 0.0);
        assert_eq!(ci.point, 0.5);
    }

    #[test]
    fn reproducible_for_a_seed() {
        let strata = vec![vec![1.0, 2.0, 5.0], vec![0.0, 4.0]];
        let a = stratified_bootstrap_ci(&strata, pooled_mean, &cfg(1000)).unwrap();
        let b = stratified_bootstrap_ci(&strata, pooled_mean, &cfg(1000)).unwrap();
        assert_eq!(a, b);
        assert!(a.contains(a.point));
    }

    #[test]
    fn rejects_bad_input() {
        let empty: Vec<Vec<f64>> = vec![vec![1.0], vec![]];
        assert_eq!(
            stratified_bootstrap_ci(&empty, pooled_mean, &cfg(10)),
            Err(BootstrapError::EmptyStratum(1))
        );
        let none: Vec<Vec<f64>> = vec![];
        assert_eq!(
            stratified_bootstrap_ci(&none, pooled_mean, &cfg(10)),
            Err(BootstrapError::NoStrata)
        );
        let ok = vec![vec![1.0]];
        let bad = BootstrapConfig {
            confidence: 1.0,
            ..cfg(10)
        };
        assert_eq!(
            stratified_bootstrap_ci(&ok, pooled_mean, &bad),
            Err(BootstrapError::BadConfidence(1.0))
        );
    }

    #[test]
    fn resampling_stays_within_strata() {
        // stratum sizes are preserved, so the per-stratum counts never change
        let strata = vec![vec![0.0; 3], vec![1.0; 1]];
        let ci = stratified_bootstrap_ci(&strata, pooled_mean, &cfg(200)).unwrap();
        assert_eq!((ci.low, ci.high), (0.25, 0.25));
    }

    #[test]
    fn multi_statistic_matches_single() {
        let strata = vec![vec![1.0, 2.0, 5.0], vec![0.0, 4.0]];
        let single = stratified_bootstrap_ci(&strata, pooled_mean, &cfg(300)).unwrap();
        let multi = stratified_bootstrap_cis(
            &strata,
            |s| vec![pooled_mean(s), -pooled_mean(s)],
            &cfg(300),
        )
        .unwrap();
        assert_eq!(multi[0], single);
        assert_eq!(multi[1].low, -single.high);
    }

    #[test]
    fn quantile_interpolates() {
        let data = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&data, 0.5), 2.0);
        assert_eq!(quantile_sorted(&data, 0.125), 0.5);
    }
}
