//! Cross-sectional significance tests over per-event CARs and CAVs.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("need at least {needed} observations, have {actual}")]
    TooFewObservations { needed: usize, actual: usize },
    #[error("all values are identical and nonzero; the statistic is undefined")]
    ZeroVariance,
    #[error("every value is zero; the signed-rank test has nothing to rank")]
    AllZeros,
    #[error("input is empty")]
    EmptyInput,
    #[error("input contains a non-finite value")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, InferenceError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    TCrossSectional,
    WilcoxonSignedRankExact,
    WilcoxonSignedRankNormal,
    Boehmer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub method: TestMethod,
    pub n_effective: usize,
}

/// Largest sample for which the signed-rank p-value is computed exactly.
pub const EXACT_WILCOXON_MAX_N: usize = 25;

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(InferenceError::NonFinite)
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_stddev(values: &[f64]) -> f64 {
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m).powi(2)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// `mean / se`, the statistic printed next to a CAAR and its standard error.
pub fn t_statistic(mean: f64, standard_error: f64) -> f64 {
    mean / standard_error
}

pub fn student_t_two_sided(statistic: f64, df: f64) -> f64 {
    if statistic == 0.0 {
        return 1.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    (2.0 * dist.cdf(-statistic.abs())).clamp(0.0, 1.0)
}

pub fn normal_two_sided(z: f64) -> f64 {
    if z == 0.0 {
        return 1.0;
    }
    let dist = Normal::standard();
    (2.0 * dist.cdf(-z.abs())).clamp(0.0, 1.0)
}

fn one_sample_t(values: &[f64], method: TestMethod) -> Result<TestResult> {
    check_finite(values)?;
    let n = values.len();
    if n < 2 {
        return Err(InferenceError::TooFewObservations { needed: 2, actual: n });
    }
    // An all-zero sample carries no evidence either way.
    if values.iter().all(|v| *v == 0.0) {
        return Ok(TestResult { statistic: 0.0, p_value: 1.0, method, n_effective: n });
    }
    let sd = sample_stddev(values);
    if sd == 0.0 || values.iter().all(|v| *v == values[0]) {
        return Err(InferenceError::ZeroVariance);
    }
    let statistic = t_statistic(mean(values), sd / (n as f64).sqrt());
    Ok(TestResult {
        statistic,
        p_value: student_t_two_sided(statistic, (n - 1) as f64),
        method,
        n_effective: n,
    })
}

/// Cross-sectional t-test of H0: mean = 0, Student-t with n - 1 df.
pub fn t_test_cross_sectional(values: &[f64]) -> Result<TestResult> {
    one_sample_t(values, TestMethod::TCrossSectional)
}

/// Standardized cross-sectional test on CARs already divided by their
/// forecast-error standard deviation.
pub fn boehmer_test(standardized_cars: &[f64]) -> Result<TestResult> {
    one_sample_t(standardized_cars, TestMethod::Boehmer)
}

pub fn positive_share(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(InferenceError::EmptyInput);
    }
    Ok(values.iter().filter(|v| **v > 0.0).count() as f64 / values.len() as f64)
}

/// Signed-rank setup: nonzero values with average ranks for tied magnitudes.
///
/// Ranks are returned doubled so that half-integer averages stay integral.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedRanks {
    pub doubled_ranks: Vec<u64>,
    pub positive: Vec<bool>,
    /// Sizes of tie groups among the magnitudes.
    pub tie_sizes: Vec<usize>,
}

impl SignedRanks {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        check_finite(values)?;
        if values.is_empty() {
            return Err(InferenceError::EmptyInput);
        }
        let mut nonzero: Vec<f64> = values.iter().copied().filter(|v| *v != 0.0).collect();
        if nonzero.is_empty() {
            return Err(InferenceError::AllZeros);
        }
        nonzero.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
        let n = nonzero.len();
        let mut doubled_ranks = vec![0u64; n];
        let mut tie_sizes = Vec::new();
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && nonzero[j + 1].abs() == nonzero[i].abs() {
                j += 1;
            }
            // Average of 1-based positions i+1 ..= j+1, doubled.
            let r2 = (i + 1 + j + 1) as u64;
            for r in &mut doubled_ranks[i..=j] {
                *r = r2;
            }
            tie_sizes.push(j - i + 1);
            i = j + 1;
        }
        let positive = nonzero.iter().map(|v| *v > 0.0).collect();
        Ok(SignedRanks { doubled_ranks, positive, tie_sizes })
    }

    pub fn n(&self) -> usize {
        self.doubled_ranks.len()
    }

    /// W+ in doubled units.
    pub fn w_plus_doubled(&self) -> u64 {
        self.doubled_ranks.iter().zip(&self.positive).filter(|(_, p)| **p).map(|(r, _)| *r).sum()
    }

    pub fn w_plus(&self) -> f64 {
        self.w_plus_doubled() as f64 / 2.0
    }

    pub fn total_doubled(&self) -> u64 {
        self.doubled_ranks.iter().sum()
    }

    /// Null mean and tie-corrected null variance of W+.
    pub fn null_moments(&self) -> (f64, f64) {
        let n = self.n() as f64;
        let mu = n * (n + 1.0) / 4.0;
        let tie: f64 = self.tie_sizes.iter().map(|&t| (t as f64).powi(3) - t as f64).sum();
        let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie / 48.0;
        (mu, var)
    }

    /// Number of sign vectors producing each doubled W+, indexed by that sum.
    ///
    /// Counting by dynamic programming over ranks gives the same distribution
    /// as enumerating all `2^n` sign assignments.
    pub fn null_distribution(&self) -> Vec<u64> {
        let total = self.total_doubled() as usize;
        let mut counts = vec![0u64; total + 1];
        counts[0] = 1;
        let mut reach = 0usize;
        for &r in &self.doubled_ranks {
            let r = r as usize;
            for s in (0..=reach).rev() {
                if counts[s] != 0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        counts
    }

    /// Exact two-sided p: share of sign vectors at least as far from the null centre.
    pub fn exact_p_value(&self) -> f64 {
        let total = self.total_doubled() as i64;
        let observed = (2 * self.w_plus_doubled() as i64 - total).abs();
        let counts = self.null_distribution();
        let extreme: u64 = counts
            .iter()
            .enumerate()
            .filter(|(s, _)| (2 * *s as i64 - total).abs() >= observed)
            .map(|(_, c)| *c)
            .sum();
        (extreme as f64 / (1u64 << self.n()) as f64).min(1.0)
    }

    /// z-equivalent of W+, optionally with a half-unit continuity correction.
    pub fn z(&self, continuity_correction: bool) -> f64 {
        let (mu, var) = self.null_moments();
        if var <= 0.0 {
            return 0.0;
        }
        let diff = self.w_plus() - mu;
        let adj = if continuity_correction { diff.abs().min(0.5) * diff.signum() } else { 0.0 };
        (diff - adj) / var.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WilcoxonOptions {
    pub continuity_correction: bool,
    pub exact_max_n: usize,
}

impl Default for WilcoxonOptions {
    fn default() -> Self {
        WilcoxonOptions { continuity_correction: true, exact_max_n: EXACT_WILCOXON_MAX_N }
    }
}

/// Signed-rank test with the default options (exact up to n = 25, corrected z).
pub fn wilcoxon_signed_rank(values: &[f64]) -> Result<TestResult> {
    wilcoxon_signed_rank_with(values, WilcoxonOptions::default())
}

/// Zeros are dropped before ranking; the reported statistic is the z-equivalent
/// of W+ and the p-value is exact for small samples.
pub fn wilcoxon_signed_rank_with(values: &[f64], opts: WilcoxonOptions) -> Result<TestResult> {
    let ranks = SignedRanks::from_values(values)?;
    let n = ranks.n();
    let statistic = ranks.z(opts.continuity_correction);
    if n <= opts.exact_max_n {
        Ok(TestResult {
            statistic,
            p_value: ranks.exact_p_value(),
            method: TestMethod::WilcoxonSignedRankExact,
            n_effective: n,
        })
    } else {
        Ok(TestResult {
            statistic,
            p_value: normal_two_sided(statistic),
            method: TestMethod::WilcoxonSignedRankNormal,
            n_effective: n,
        })
    }
}

/// Significance stars at the 10 / 5 / 1 % levels.
pub fn stars(p_value: f64) -> &'static str {
    if p_value < 0.01 {
        "***"
    } else if p_value < 0.05 {
        "**"
    } else if p_value < 0.10 {
        "*"
    } else {
        ""
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute-force exact p over every sign vector, using the average-rank magnitudes.
    fn enumerate_p(values: &[f64]) -> f64 {
        let mut mags: Vec<f64> = values.iter().filter(|v| **v != 0.0).map(|v| v.abs()).collect();
        mags.sort_by(|a, b| a.total_cmp(b));
        let n = mags.len();
        let rank_of = |m: f64| {
            let below = mags.iter().filter(|x| **x < m).count() as f64;
            let equal = mags.iter().filter(|x| **x == m).count() as f64;
            below + (equal + 1.0) / 2.0
        };
        let ranks: Vec<f64> = values.iter().filter(|v| **v != 0.0).map(|v| rank_of(v.abs())).collect();
        let w_obs: f64 = values.iter().filter(|v| **v != 0.0).zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
        let mu = ranks.iter().sum::<f64>() / 2.0;
        let mut hits = 0u64;
        for mask in 0u64..(1 << n) {
            let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if (w - mu).abs() >= (w_obs - mu).abs() - 1e-9 {
                hits += 1;
            }
        }
        hits as f64 / (1u64 << n) as f64
    }

    #[test]
    fn t_test_examples() {
        let r = t_test_cross_sectional(&[-2.0, -1.0, 1.0, 2.0]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert_eq!(t_test_cross_sectional(&[3.0, 3.0, 3.0]), Err(InferenceError::ZeroVariance));
        assert!(matches!(t_test_cross_sectional(&[1.0]), Err(InferenceError::TooFewObservations { .. })));
        let t = t_statistic(-7.952, 2.598);
        assert_eq!(format!("{t:.2}"), "-3.06");
    }

    #[test]
    fn t_test_against_hand_computation() {
        let v = [1.0, 2.0, 3.0, 4.0];
        // mean 2.5, sd sqrt(5/3), se = sd/2
        let r = t_test_cross_sectional(&v).unwrap();
        let expected = 2.5 / ((5.0f64 / 3.0).sqrt() / 2.0);
        assert!((r.statistic - expected).abs() < 1e-12);
        // Two-sided p with 3 df for t = 3.872983: 0.030466 (tabulated).
        assert!((r.p_value - 0.030466).abs() < 1e-5, "{}", r.p_value);
    }

    #[test]
    fn wilcoxon_examples() {
        let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(r.method, TestMethod::WilcoxonSignedRankExact);
        assert_eq!(r.p_value, 2.0 / 32.0);
        let ranks = SignedRanks::from_values(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(ranks.w_plus(), 15.0);

        let r = wilcoxon_signed_rank(&[3.0, -3.0]).unwrap();
        let ranks = SignedRanks::from_values(&[3.0, -3.0]).unwrap();
        assert_eq!(ranks.doubled_ranks, vec![3, 3]);
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.statistic, 0.0);

        assert_eq!(wilcoxon_signed_rank(&[0.0, 0.0]), Err(InferenceError::AllZeros));
        assert_eq!(wilcoxon_signed_rank(&[]), Err(InferenceError::EmptyInput));
    }

    #[test]
    fn zeros_are_dropped() {
        let r = wilcoxon_signed_rank(&[0.0, 1.0, 2.0, 0.0, 3.0]).unwrap();
        assert_eq!(r.n_effective, 3);
        assert_eq!(r.p_value, 2.0 / 8.0);
    }

    #[test]
    fn exact_matches_enumeration_with_ties() {
        let cases: &[&[f64]] = &[
            &[1.0, -2.0, 2.0, 3.0, -3.0, 3.0, 7.0],
            &[0.5, 0.5, -0.5, 1.5, 2.0, -4.0, 0.0, 6.0],
            &[-1.0, -2.0, -3.0],
            &[2.0, 2.0, 2.0, 2.0],
        ];
        for v in cases {
            let r = wilcoxon_signed_rank(v).unwrap();
            assert!((r.p_value - enumerate_p(v)).abs() < 1e-15, "{v:?}");
        }
    }

    #[test]
    fn null_distribution_sums_to_total() {
        let ranks = SignedRanks::from_values(&[1.0, -2.0, 2.0, 5.0, 0.3, -0.3, 9.0, 4.0]).unwrap();
        let counts = ranks.null_distribution();
        assert_eq!(counts.iter().sum::<u64>(), 1 << ranks.n());
    }

    #[test]
    fn normal_path_above_cutoff() {
        let v: Vec<f64> = (1..=30).map(|i| i as f64 * if i % 3 == 0 { -1.0 } else { 1.0 }).collect();
        let r = wilcoxon_signed_rank(&v).unwrap();
        assert_eq!(r.method, TestMethod::WilcoxonSignedRankNormal);
        assert!((r.p_value - normal_two_sided(r.statistic)).abs() < 1e-15);
    }

    #[test]
    fn boehmer_examples() {
        let r = boehmer_test(&[0.0; 5]).unwrap();
        assert_eq!(r.statistic, 0.0);
        let r = boehmer_test(&[1.0, -1.0]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);

        let scars = [0.8, 1.9, -0.4, 2.2, 1.1, 0.3, 1.6, -0.2];
        let n = scars.len() as f64;
        let m = scars.iter().sum::<f64>() / n;
        let var = scars.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / (n - 1.0);
        let expected = m / (var.sqrt() / n.sqrt());
        let r = boehmer_test(&scars).unwrap();
        assert!((r.statistic - expected).abs() < 1e-10);
        assert_eq!(r.method, TestMethod::Boehmer);
    }

    #[test]
    fn positive_share_examples() {
        assert_eq!(positive_share(&[1.0, -1.0, 2.0, 3.0]).unwrap(), 0.75);
        assert_eq!(positive_share(&[-1.0, -2.0]).unwrap(), 0.0);
        assert_eq!(positive_share(&[0.0, 1.0]).unwrap(), 0.5);
        let mut v = vec![1.0; 11];
        v.extend(vec![-1.0; 10]);
        let share = positive_share(&v).unwrap();
        assert!((share - 0.5238).abs() < 1e-4);
        assert_eq!(format!("{:.0}%", share * 100.0), "52%");
        assert_eq!(positive_share(&[]), Err(InferenceError::EmptyInput));
    }

    #[test]
    fn star_thresholds() {
        assert_eq!(stars(0.04), "**");
        assert_eq!(stars(0.009), "***");
        assert_eq!(stars(0.01), "**");
        assert_eq!(stars(0.05), "*");
        assert_eq!(stars(0.099), "*");
        assert_eq!(stars(0.10), "");
    }

    proptest! {
        #[test]
        fn sign_equivariance(v in prop::collection::vec(-100.0f64..100.0, 3..15)) {
            let neg: Vec<f64> = v.iter().map(|x| -x).collect();
            if let (Ok(a), Ok(b)) = (t_test_cross_sectional(&v), t_test_cross_sectional(&neg)) {
                prop_assert_eq!(a.statistic, -b.statistic);
                prop_assert_eq!(a.p_value, b.p_value);
            }
            if let (Ok(a), Ok(b)) = (wilcoxon_signed_rank(&v), wilcoxon_signed_rank(&neg)) {
                prop_assert_eq!(a.statistic, -b.statistic);
                prop_assert_eq!(a.p_value, b.p_value);
            }
        }

        #[test]
        fn scale_invariance(v in prop::collection::vec(-100.0f64..100.0, 3..15), k in 0.01f64..100.0) {
            let scaled: Vec<f64> = v.iter().map(|x| x * k).collect();
            if let (Ok(a), Ok(b)) = (t_test_cross_sectional(&v), t_test_cross_sectional(&scaled)) {
                prop_assert!((a.statistic - b.statistic).abs() < 1e-12 * a.statistic.abs().max(1.0));
                prop_assert!((a.p_value - b.p_value).abs() < 1e-12);
            }
            // Scaling by k preserves the magnitude order; ties could only appear by rounding.
            let a = SignedRanks::from_values(&v);
            let b = SignedRanks::from_values(&scaled);
            if let (Ok(a), Ok(b)) = (a, b) {
                if a == b {
                    prop_assert_eq!(a.exact_p_value(), b.exact_p_value());
                    prop_assert_eq!(a.z(true), b.z(true));
                }
            }
        }

        #[test]
        fn exact_equals_enumeration(v in prop::collection::vec((-5i32..6).prop_map(|x| x as f64 * 0.5), 1..11)) {
            if let Ok(r) = wilcoxon_signed_rank(&v) {
                prop_assert!((r.p_value - enumerate_p(&v)).abs() < 1e-15);
                prop_assert!(r.p_value > 0.0 && r.p_value <= 1.0);
            }
        }
    }
}
