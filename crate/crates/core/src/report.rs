//! Test reports shared by every hypothesis test.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dist::{chi_square_sf, normal_sf};

/// Levels reported in `reject_at` unless overridden.
pub const DEFAULT_LEVELS: [f64; 3] = [0.01, 0.05, 0.10];

/// Reference law of a test statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NullDistribution {
    ChiSquare {
        df: usize,
    },
    /// `(statistic - center) / scale` is standard normal; `two_sided` for the comparator.
    Normal {
        center: f64,
        scale: f64,
        two_sided: bool,
    },
    Bootstrap {
        draws: Vec<f64>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub bandwidths: Vec<f64>,
    pub propensity: Vec<String>,
    pub seed: Option<u64>,
    pub treatments: Vec<i64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub test: String,
    pub statistic: f64,
    pub null: NullDistribution,
    pub df: Option<usize>,
    pub p_value: f64,
    pub reject_at: BTreeMap<String, bool>,
    pub meta: ReportMeta,
}

fn level_key(a: f64) -> String {
    format!("{a}")
}

impl TestReport {
    pub fn chi_square(test: impl Into<String>, statistic: f64, df: usize) -> Self {
        let p = chi_square_sf(statistic, df);
        Self::build(
            test.into(),
            statistic,
            NullDistribution::ChiSquare { df },
            Some(df),
            p,
        )
    }

    pub fn normal(
        test: impl Into<String>,
        statistic: f64,
        center: f64,
        scale: f64,
        two_sided: bool,
    ) -> Self {
        let zscore = (statistic - center) / scale;
        let p = if two_sided {
            (2.0 * normal_sf(zscore.abs())).min(1.0)
        } else {
            normal_sf(zscore)
        };
        let p = if p.is_nan() { 0.0 } else { p };
        let null = NullDistribution::Normal {
            center,
            scale,
            two_sided,
        };
        Self::build(test.into(), statistic, null, None, p)
    }

    /// `p = (1 + #{T* ≥ T}) / (B + 1)`.
    pub fn bootstrap(test: impl Into<String>, statistic: f64, draws: Vec<f64>) -> Self {
        let exceed = draws.iter().filter(|d| **d >= statistic).count();
        let p = (1 + exceed) as f64 / (draws.len() + 1) as f64;
        let mut r = Self::build(
            test.into(),
            statistic,
            NullDistribution::Bootstrap { draws },
            None,
            p,
        );
        r.set_levels(&DEFAULT_LEVELS);
        r
    }

    fn build(
        test: String,
        statistic: f64,
        null: NullDistribution,
        df: Option<usize>,
        p_value: f64,
    ) -> Self {
        let mut r = TestReport {
            test,
            statistic,
            null,
            df,
            p_value,
            reject_at: BTreeMap::new(),
            meta: ReportMeta::default(),
        };
        r.set_levels(&DEFAULT_LEVELS);
        r
    }

    /// Recomputes the decisions at the given levels.
    pub fn set_levels(&mut self, levels: &[f64]) {
        self.reject_at = levels
            .iter()
            .map(|&a| (level_key(a), self.rejects(a)))
            .collect();
    }

    /// Decision at level `alpha`. Bootstrap tests compare against the empirical
    /// `(1 - α)` quantile of the draws; the others use `p ≤ α`.
    pub fn rejects(&self, alpha: f64) -> bool {
        if alpha >= 1.0 {
            return true;
        }
        match &self.null {
            NullDistribution::Bootstrap { draws } => {
                self.statistic > bootstrap_critical_value(draws, alpha)
            }
            _ => self.p_value <= alpha,
        }
    }

    pub fn with_meta(mut self, meta: ReportMeta) -> Self {
        self.meta = meta;
        self
    }
}

/// Empirical `(1 - α)` quantile (inverse-CDF definition) of the draws.
pub fn bootstrap_critical_value(draws: &[f64], alpha: f64) -> f64 {
    if draws.is_empty() || alpha >= 1.0 {
        return f64::NEG_INFINITY;
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let b = sorted.len();
    let idx = (((1.0 - alpha) * b as f64).ceil() as usize).clamp(1, b) - 1;
    sorted[idx]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chi_square_report_is_coherent() {
        let r = TestReport::chi_square("beta", 16.918977604620448, 9);
        assert!((r.p_value - 0.05).abs() < 1e-10);
        assert_eq!(r.df, Some(9));
        assert!(!r.reject_at["0.01"]);
        assert!(r.reject_at["0.1"]);
    }

    #[test]
    fn centered_normal_is_half() {
        let r = TestReport::normal("g", 2.0, 2.0, 0.7, false);
        assert!((r.p_value - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bootstrap_p_value_and_quantile_rule() {
        let draws: Vec<f64> = (1..=99).map(|i| i as f64).collect();
        let r = TestReport::bootstrap("g", 95.5, draws.clone());
        assert!((r.p_value - 5.0 / 100.0).abs() < 1e-15);
        assert_eq!(bootstrap_critical_value(&draws, 0.05), 95.0);
        assert!(r.rejects(0.05));
        assert!(!TestReport::bootstrap("g", 94.0, draws).rejects(0.05));
    }

    #[test]
    fn level_one_always_rejects() {
        assert!(TestReport::chi_square("beta", 0.0, 2).rejects(1.0));
        assert!(TestReport::bootstrap("g", -1.0, vec![0.0, 1.0]).rejects(1.0));
    }
}
