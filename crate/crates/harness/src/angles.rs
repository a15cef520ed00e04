//! Principal angles between successive SVD bases of a gradient stream,
//! against independent random bases of the same shape.

use frugal_core::linalg::{principal_angle_cosines, random_semi_orthogonal, truncated_svd, Matrix, OrthoBasis};
use frugal_core::projection::derive_seed;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AngleConfig {
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub update_gap: u64,
    pub pairs: usize,
    /// Weight of the fixed component `G_fixed` in every stream element.
    pub signal: f64,
    /// Standard deviation of the fresh Gaussian component.
    pub noise: f64,
    pub bins: usize,
    pub seed: u64,
}

impl Default for AngleConfig {
    fn default() -> Self {
        Self {
            rows: 64,
            cols: 32,
            rank: 8,
            update_gap: 10,
            pairs: 20,
            signal: 1.0,
            noise: 0.1,
            bins: 20,
            seed: 0,
        }
    }
}

impl AngleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.rows == 0 || self.cols == 0 || self.rows.saturating_mul(self.cols) > 1 << 20 {
            return bad("stream shape must be positive and at most 2^20 entries");
        }
        if self.rank == 0 || self.rank > self.rows.min(self.cols) {
            return bad("rank must lie in 1..=min(rows, cols)");
        }
        if self.update_gap == 0 || self.pairs < 2 || self.pairs > 10_000 || self.bins == 0 || self.bins > 10_000 {
            return bad("update_gap, pairs (>= 2) and bins must be positive and moderate");
        }
        if !(self.signal.is_finite() && self.noise.is_finite() && self.noise >= 0.0) {
            return bad("signal and noise must be finite, noise non-negative");
        }
        Ok(())
    }

    /// Number of stream elements consumed: `(pairs + 1)` refreshes `T` apart.
    pub fn stream_length(&self) -> u64 {
        self.pairs as u64 * self.update_gap + 1
    }
}

pub fn parse_angle_config(text: &str) -> Result<AngleConfig> {
    let cfg: AngleConfig = crate::config::parse_json(text, "angle config")?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub svd: usize,
    pub random: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    /// One-sided p-value for "the first sample has the larger mean".
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AngleReport {
    /// Cosines for each pair of SVD bases `T` steps apart.
    pub svd_cosines: Vec<Vec<f64>>,
    pub random_cosines: Vec<Vec<f64>>,
    pub svd_pair_means: Vec<f64>,
    pub random_pair_means: Vec<f64>,
    /// Smallest over pairs of the largest cosine.
    pub svd_min_max_cosine: f64,
    pub random_min_max_cosine: f64,
    pub welch: WelchTest,
    pub histogram: Vec<HistogramBin>,
}

/// One-sided Welch two-sample t-test of `mean(a) > mean(b)`.
pub fn welch_test(a: &[f64], b: &[f64]) -> WelchTest {
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        (n, m, v)
    };
    let (na, ma, va) = stats(a);
    let (nb, mb, vb) = stats(b);
    let (sa, sb) = (va / na, vb / nb);
    let se = (sa + sb).sqrt();
    if se == 0.0 {
        let p = if ma > mb { 0.0 } else { 1.0 };
        return WelchTest { t: f64::INFINITY.copysign(ma - mb), df: na + nb - 2.0, p_value: p };
    }
    let t = (ma - mb) / se;
    let df = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let p_value = match StudentsT::new(0.0, 1.0, df) {
        Ok(dist) => dist.sf(t),
        Err(_) => f64::NAN,
    };
    WelchTest { t, df, p_value }
}

fn leading_basis(g: &Matrix, rank: usize) -> Result<OrthoBasis> {
    let svd = truncated_svd(g, rank)?;
    Ok(if g.rows() >= g.cols() { svd.u } else { svd.v })
}

pub fn run_angle_analysis(cfg: &AngleConfig) -> Result<AngleReport> {
    cfg.validate()?;
    let (rows, cols) = (cfg.rows, cfg.cols);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fixed = Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng));
    let mut bases = Vec::with_capacity(cfg.pairs + 1);
    for t in 0..cfg.stream_length() {
        let g = fixed.zip_map(&Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng)), |f, z| {
            cfg.signal * f + cfg.noise * z
        })?;
        if t % cfg.update_gap == 0 {
            bases.push(leading_basis(&g, cfg.rank)?);
        }
    }
    let svd_cosines: Vec<Vec<f64>> = bases
        .windows(2)
        .map(|w| principal_angle_cosines(&w[0], &w[1]))
        .collect::<std::result::Result<_, _>>()?;
    let long = rows.max(cols);
    let random_cosines: Vec<Vec<f64>> = (0..cfg.pairs as u64)
        .map(|i| {
            let p = random_semi_orthogonal(derive_seed(cfg.seed, 2 * i + 1, 1), long, cfg.rank)?;
            let q = random_semi_orthogonal(derive_seed(cfg.seed, 2 * i + 2, 1), long, cfg.rank)?;
            principal_angle_cosines(&p, &q)
        })
        .collect::<std::result::Result<_, _>>()?;
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let svd_pair_means: Vec<f64> = svd_cosines.iter().map(mean).collect();
    let random_pair_means: Vec<f64> = random_cosines.iter().map(mean).collect();
    let min_max = |c: &[Vec<f64>]| c.iter().map(|v| v[0]).fold(f64::INFINITY, f64::min);
    let mut histogram: Vec<HistogramBin> = (0..cfg.bins)
        .map(|b| HistogramBin {
            lo: b as f64 / cfg.bins as f64,
            hi: (b + 1) as f64 / cfg.bins as f64,
            svd: 0,
            random: 0,
        })
        .collect();
    let bin = |c: f64| ((c * cfg.bins as f64) as usize).min(cfg.bins - 1);
    for c in svd_cosines.iter().flatten() {
        histogram[bin(*c)].svd += 1;
    }
    for c in random_cosines.iter().flatten() {
        histogram[bin(*c)].random += 1;
    }
    Ok(AngleReport {
        svd_min_max_cosine: min_max(&svd_cosines),
        random_min_max_cosine: min_max(&random_cosines),
        welch: welch_test(&svd_pair_means, &random_pair_means),
        svd_cosines,
        random_cosines,
        svd_pair_means,
        random_pair_means,
        histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_stream_gives_unit_cosines() {
        let cfg = AngleConfig {
            rows: 12,
            cols: 8,
            rank: 3,
            noise: 0.0,
            pairs: 4,
            ..AngleConfig::default()
        };
        let r = run_angle_analysis(&cfg).unwrap();
        assert!(r.svd_cosines.iter().flatten().all(|c| (c - 1.0).abs() < 1e-9));
    }

    #[test]
    fn pure_noise_stream_looks_random() {
        let cfg = AngleConfig {
            rows: 200,
            cols: 40,
            rank: 4,
            signal: 0.0,
            noise: 1.0,
            pairs: 10,
            ..AngleConfig::default()
        };
        let r = run_angle_analysis(&cfg).unwrap();
        let svd: f64 = r.svd_pair_means.iter().sum::<f64>() / 10.0;
        let rnd: f64 = r.random_pair_means.iter().sum::<f64>() / 10.0;
        assert!(svd < 0.5 && rnd < 0.5, "{svd} {rnd}");
    }

    #[test]
    fn welch_against_known_values() {
        // Equal variances and sizes: t = diff / sqrt(2 s^2 / n), df = 2n - 2.
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [0.0, 1.0, 2.0, 3.0];
        let w = welch_test(&a, &b);
        let s2 = 5.0 / 3.0;
        assert!((w.t - 1.0 / (2.0 * s2 / 4.0f64).sqrt()).abs() < 1e-12);
        assert!((w.df - 6.0).abs() < 1e-12);
        assert!(w.p_value > 0.1 && w.p_value < 0.5);
    }

    #[test]
    fn histogram_counts_every_cosine() {
        let cfg = AngleConfig { rows: 10, cols: 6, rank: 2, pairs: 3, ..AngleConfig::default() };
        let r = run_angle_analysis(&cfg).unwrap();
        let svd: usize = r.histogram.iter().map(|b| b.svd).sum();
        let rnd: usize = r.histogram.iter().map(|b| b.random).sum();
        assert_eq!((svd, rnd), (6, 6));
    }
}
