//! Parametric missing-propensity models fitted by binary conditional likelihood.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{ObservationRecord, Study, SubjectTrajectory, TreatmentSample};
use crate::error::{Error, Result};

/// Lower clamp applied to cumulative propensities.
pub const PI_FLOOR: f64 = 1e-3;
const MAX_ITER: usize = 100;
const GRAD_TOL: f64 = 1e-8;
const THETA_DIVERGENCE: f64 = 1e4;

/// Read-only view of a subject's history just before visit `m`.
///
/// Only `records[..m]` and the scheduled time of visit `m` are visible.
#[derive(Debug, Clone, Copy)]
pub struct History<'a> {
    records: &'a [ObservationRecord],
    m: usize,
}

impl<'a> History<'a> {
    pub fn new(records: &'a [ObservationRecord], m: usize) -> Self {
        assert!(m < records.len());
        History { records, m }
    }

    pub fn visit(&self) -> usize {
        self.m
    }

    pub fn time(&self) -> f64 {
        self.records[self.m].time
    }

    /// Record `l` visits back, if it was observed.
    pub fn lag(&self, l: usize) -> Option<&'a ObservationRecord> {
        if l == 0 || l > self.m {
            return None;
        }
        let r = &self.records[self.m - l];
        r.observed.then_some(r)
    }

    pub fn lag_y(&self, l: usize) -> Option<f64> {
        self.lag(l).and_then(|r| r.response)
    }

    pub fn lag_x(&self, l: usize, c: usize) -> Option<f64> {
        self.lag(l)
            .and_then(|r| r.covariates.as_ref())
            .map(|x| x[c])
    }

    /// Covariate `c` at the most recent observed visit.
    pub fn last_x(&self, c: usize) -> f64 {
        (1..=self.m).find_map(|l| self.lag_x(l, c)).unwrap_or(0.0)
    }
}

type FeatureFn = dyn Fn(&History) -> Vec<f64> + Send + Sync;

/// Feature construction for the logistic model of `P(δ_m = 1 | past)`.
#[derive(Clone)]
pub enum FeatureRule {
    Intercept,
    /// `x_c` at the previous visit.
    LagCovariate {
        covariate: usize,
        intercept: bool,
    },
    /// `x_c` at the previous visit plus `y_{m-1} - y_{m-2}` (zero at the second visit).
    LagCovariateResponseDiff {
        covariate: usize,
        intercept: bool,
    },
    /// Last observed `x_c` plus the three lagged responses (zero when unavailable).
    M1 {
        covariate: usize,
    },
    /// Intercept plus the three lagged responses.
    M2,
    /// `M2` plus `y_{m-1}^2` and `y_{m-1} y_{m-2}`.
    M3,
    Custom {
        name: String,
        dim: usize,
        rule: Arc<FeatureFn>,
    },
}

impl FeatureRule {
    pub fn dim(&self) -> usize {
        match self {
            FeatureRule::Intercept => 1,
            FeatureRule::LagCovariate { intercept, .. } => 1 + *intercept as usize,
            FeatureRule::LagCovariateResponseDiff { intercept, .. } => 2 + *intercept as usize,
            FeatureRule::M1 { .. } | FeatureRule::M2 => 4,
            FeatureRule::M3 => 6,
            FeatureRule::Custom { dim, .. } => *dim,
        }
    }

    pub fn features(&self, h: &History) -> Vec<f64> {
        let y = |l| h.lag_y(l).unwrap_or(0.0);
        match self {
            FeatureRule::Intercept => vec![1.0],
            FeatureRule::LagCovariate {
                covariate,
                intercept,
            } => {
                let mut f = Vec::with_capacity(2);
                if *intercept {
                    f.push(1.0);
                }
                f.push(h.lag_x(1, *covariate).unwrap_or(0.0));
                f
            }
            FeatureRule::LagCovariateResponseDiff {
                covariate,
                intercept,
            } => {
                let mut f = Vec::with_capacity(3);
                if *intercept {
                    f.push(1.0);
                }
                f.push(h.lag_x(1, *covariate).unwrap_or(0.0));
                let diff = match (h.lag_y(1), h.lag_y(2)) {
                    (Some(a), Some(b)) => a - b,
                    _ => 0.0,
                };
                f.push(diff);
                f
            }
            FeatureRule::M1 { covariate } => vec![h.last_x(*covariate), y(1), y(2), y(3)],
            FeatureRule::M2 => vec![1.0, y(1), y(2), y(3)],
            FeatureRule::M3 => vec![1.0, y(1), y(2), y(3), y(1) * y(1), y(1) * y(2)],
            FeatureRule::Custom { rule, .. } => rule(h),
        }
    }

    pub fn name(&self) -> String {
        match self {
            FeatureRule::Intercept => "intercept".into(),
            FeatureRule::LagCovariate {
                covariate,
                intercept,
            } => {
                format!(
                    "{}x{}[m-1]",
                    if *intercept { "1+" } else { "" },
                    covariate + 1
                )
            }
            FeatureRule::LagCovariateResponseDiff {
                covariate,
                intercept,
            } => format!(
                "{}x{}[m-1]+dy[m-1]",
                if *intercept { "1+" } else { "" },
                covariate + 1
            ),
            FeatureRule::M1 { .. } => "M1".into(),
            FeatureRule::M2 => "M2".into(),
            FeatureRule::M3 => "M3".into(),
            FeatureRule::Custom { name, .. } => name.clone(),
        }
    }
}

impl fmt::Debug for FeatureRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FeatureRule({})", self.name())
    }
}

/// A logistic propensity model.
#[derive(Debug, Clone)]
pub struct PropensitySpec {
    pub rule: FeatureRule,
}

impl PropensitySpec {
    pub fn new(rule: FeatureRule) -> Self {
        PropensitySpec { rule }
    }

    pub fn dim(&self) -> usize {
        self.rule.dim()
    }

    pub fn name(&self) -> String {
        self.rule.name()
    }

    /// `p(history; θ)` under the logistic link.
    pub fn probability(&self, h: &History, theta: &[f64]) -> f64 {
        let f = self.rule.features(h);
        logistic(dot(&f, theta))
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^η)` without overflow.
#[inline]
fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

/// Maximized binary likelihood fit.
#[derive(Debug, Clone)]
pub struct PropensityFit {
    pub spec: PropensitySpec,
    pub theta_hat: Vec<f64>,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Number of likelihood terms.
    pub n_terms: usize,
}

impl PropensityFit {
    /// A fixed (not estimated) parameter, e.g. the truth in simulations.
    pub fn fixed(spec: PropensitySpec, theta: Vec<f64>) -> Self {
        assert_eq!(theta.len(), spec.dim());
        PropensityFit {
            spec,
            theta_hat: theta,
            loglik: f64::NAN,
            aic: f64::NAN,
            bic: f64::NAN,
            iterations: 0,
            converged: true,
            n_terms: 0,
        }
    }

    /// Per-visit propensity `p_m` (1 at the first visit).
    pub fn p_visit(&self, subject: &SubjectTrajectory, m: usize) -> f64 {
        if m == 0 {
            return 1.0;
        }
        self.spec
            .probability(&History::new(&subject.records, m), &self.theta_hat)
    }

    /// `π_m = ∏_{l=m-d}^{m} p_l`, clamped to `[1e-3, 1]`.
    pub fn pi_cumulative(&self, subject: &SubjectTrajectory, m: usize, lag_d: usize) -> f64 {
        pi_cumulative(subject, m, self, lag_d)
    }
}

/// Cumulative propensity of visit `m`. Factors whose own lag window is incomplete are
/// skipped, since their visit was forced to missing and carries no model probability.
pub fn pi_cumulative(
    subject: &SubjectTrajectory,
    m: usize,
    fit: &PropensityFit,
    lag_d: usize,
) -> f64 {
    let lo = m.saturating_sub(lag_d).max(1);
    let mut pi = 1.0;
    for l in lo..=m {
        if !subject.delta_lag[l] {
            continue;
        }
        pi *= fit.p_visit(subject, l);
    }
    if pi < PI_FLOOR {
        log::warn!(
            "propensity {pi:.3e} for subject {} visit {m} clamped to {PI_FLOOR}",
            subject.subject_id
        );
        return PI_FLOOR;
    }
    pi.min(1.0)
}

struct Terms {
    features: DMatrix<f64>,
    response: Vec<f64>,
}

fn likelihood_terms(sample: &TreatmentSample, spec: &PropensitySpec) -> Terms {
    let dim = spec.dim();
    let mut flat = Vec::new();
    let mut response = Vec::new();
    for s in &sample.subjects {
        for m in 1..s.len() {
            if !s.delta_lag[m] {
                continue;
            }
            let f = spec.rule.features(&History::new(&s.records, m));
            assert_eq!(f.len(), dim, "feature rule returned the wrong dimension");
            flat.extend(f);
            response.push(if s.records[m].observed { 1.0 } else { 0.0 });
        }
    }
    let n = response.len();
    Terms {
        features: DMatrix::from_row_slice(n, dim, &flat),
        response,
    }
}

fn loglik(terms: &Terms, theta: &DVector<f64>) -> f64 {
    let eta = &terms.features * theta;
    eta.iter()
        .zip(&terms.response)
        .map(|(e, y)| y * e - softplus(*e))
        .sum()
}

/// Newton iteration with step-halving on the concave binary log-likelihood.
pub fn fit_propensity(
    sample: &TreatmentSample,
    spec: &PropensitySpec,
    _lag_d: usize,
) -> Result<PropensityFit> {
    let terms = likelihood_terms(sample, spec);
    let n = terms.response.len();
    let dim = spec.dim();
    if n == 0 {
        return Err(Error::InvalidInput("no propensity likelihood terms".into()));
    }
    let ones = terms.response.iter().filter(|y| **y > 0.5).count();
    if ones == 0 || ones == n {
        return Err(Error::CompleteSeparation);
    }
    let mut theta = DVector::zeros(dim);
    let mut ll = loglik(&terms, &theta);
    for iter in 1..=MAX_ITER {
        let eta = &terms.features * &theta;
        let mut grad = DVector::zeros(dim);
        let mut info = DMatrix::zeros(dim, dim);
        for a in 0..n {
            let p = logistic(eta[a]);
            let row = terms.features.row(a);
            let r = terms.response[a] - p;
            let w = p * (1.0 - p);
            for c in 0..dim {
                grad[c] += r * row[c];
                for d in 0..dim {
                    info[(c, d)] += w * row[c] * row[d];
                }
            }
        }
        if grad.amax() < GRAD_TOL {
            return Ok(finish(spec, theta, ll, iter - 1, n));
        }
        let step = match info.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => info
                .lu()
                .solve(&grad)
                .ok_or(Error::SingularSystem("propensity information matrix"))?,
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &theta + &step * t;
            let cll = loglik(&terms, &cand);
            if cll.is_finite() && cll >= ll - 1e-12 * ll.abs() {
                theta = cand;
                ll = cll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if theta.norm() > THETA_DIVERGENCE || ll > -1e-10 {
            return Err(Error::CompleteSeparation);
        }
        if !accepted {
            // no ascent direction left at machine precision
            let fit = finish(spec, theta, ll, iter, n);
            return Ok(fit);
        }
    }
    Err(Error::NonConvergence {
        what: "propensity Newton",
        iterations: MAX_ITER,
    })
}

fn finish(
    spec: &PropensitySpec,
    theta: DVector<f64>,
    ll: f64,
    iterations: usize,
    n: usize,
) -> PropensityFit {
    let dim = spec.dim() as f64;
    PropensityFit {
        spec: spec.clone(),
        theta_hat: theta.iter().copied().collect(),
        loglik: ll,
        aic: -2.0 * ll + 2.0 * dim,
        bic: -2.0 * ll + (n as f64).ln() * dim,
        iterations,
        converged: true,
        n_terms: n,
    }
}

/// Fits `spec` unless the sample has no modelled missing visit, in which case every
/// propensity is 1 and `None` is returned.
pub fn fit_if_missing(
    sample: &TreatmentSample,
    spec: &PropensitySpec,
    lag_d: usize,
) -> Result<Option<PropensityFit>> {
    let any_missing = sample
        .subjects
        .iter()
        .any(|s| (1..s.len()).any(|m| s.delta_lag[m] && !s.records[m].observed));
    if !any_missing {
        return Ok(None);
    }
    fit_propensity(sample, spec, lag_d).map(Some)
}

/// Fits one spec per treatment and attaches the fits to the study.
pub fn attach_propensity(study: &mut Study, specs: &[PropensitySpec]) -> Result<()> {
    if specs.len() != study.k() {
        return Err(Error::InvalidInput(format!(
            "{} propensity specs for {} treatments",
            specs.len(),
            study.k()
        )));
    }
    let d = study.lag_d;
    for (s, spec) in study.samples.iter_mut().zip(specs) {
        s.propensity = fit_if_missing(s, spec, d)?;
    }
    Ok(())
}

/// One row of a model-comparison table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelScore {
    pub model: String,
    pub dim: usize,
    pub loglik: Option<f64>,
    pub aic: Option<f64>,
    pub bic: Option<f64>,
    pub delta_aic: Option<f64>,
    pub delta_bic: Option<f64>,
    pub error: Option<String>,
}

/// Fits every spec and ranks them by BIC, then by dimension, then by listing order.
/// Failed fits are kept at the bottom of the table with their error message.
pub fn compare_propensity_models(
    sample: &TreatmentSample,
    specs: &[PropensitySpec],
    lag_d: usize,
) -> Result<Vec<ModelScore>> {
    if specs.len() < 2 {
        return Err(Error::InvalidInput(
            "need at least two propensity models".into(),
        ));
    }
    let mut rows: Vec<(usize, ModelScore)> = specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let row = match fit_propensity(sample, spec, lag_d) {
                Ok(f) => ModelScore {
                    model: spec.name(),
                    dim: spec.dim(),
                    loglik: Some(f.loglik),
                    aic: Some(f.aic),
                    bic: Some(f.bic),
                    delta_aic: None,
                    delta_bic: None,
                    error: None,
                },
                Err(e) => ModelScore {
                    model: spec.name(),
                    dim: spec.dim(),
                    loglik: None,
                    aic: None,
                    bic: None,
                    delta_aic: None,
                    delta_bic: None,
                    error: Some(e.to_string()),
                },
            };
            (i, row)
        })
        .collect();
    rows.sort_by(|(ia, a), (ib, b)| {
        let key = |s: &ModelScore| s.bic.unwrap_or(f64::INFINITY);
        key(a)
            .total_cmp(&key(b))
            .then(a.dim.cmp(&b.dim))
            .then(ia.cmp(ib))
    });
    let best_aic = rows
        .iter()
        .filter_map(|(_, r)| r.aic)
        .fold(f64::INFINITY, f64::min);
    let best_bic = rows
        .iter()
        .filter_map(|(_, r)| r.bic)
        .fold(f64::INFINITY, f64::min);
    Ok(rows
        .into_iter()
        .map(|(_, mut r)| {
            r.delta_aic = r.aic.map(|a| a - best_aic);
            r.delta_bic = r.bic.map(|b| b - best_bic);
            r
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ObservationRecord, SubjectTrajectory};

    fn subject(id: i64, observed: &[bool], x: f64) -> SubjectTrajectory {
        let t = observed.len();
        let records = observed
            .iter()
            .enumerate()
            .map(|(m, &o)| ObservationRecord {
                treatment_id: 1,
                subject_id: id,
                time: (m as f64 + 0.5) / t as f64,
                covariates: o.then(|| vec![x]),
                response: o.then_some(m as f64),
                observed: o,
            })
            .collect();
        SubjectTrajectory::new(id, records, 1)
    }

    fn sample(subjects: Vec<SubjectTrajectory>) -> TreatmentSample {
        let t = subjects[0].len();
        TreatmentSample {
            treatment_id: 1,
            subjects,
            schedule_length: t,
            bandwidth: None,
            propensity: None,
        }
    }

    #[test]
    fn all_observed_intercept_fit_is_separation() {
        let s = sample((0..5).map(|i| subject(i, &[true; 4], 1.0)).collect());
        let err = fit_propensity(&s, &PropensitySpec::new(FeatureRule::Intercept), 1).unwrap_err();
        assert_eq!(err, Error::CompleteSeparation);
    }

    #[test]
    fn half_missing_intercept_fit_is_zero() {
        // each subject contributes one observed and one missing eligible visit
        let pattern = [true, true, false];
        let s = sample((0..6).map(|i| subject(i, &pattern, 1.0)).collect());
        let fit = fit_propensity(&s, &PropensitySpec::new(FeatureRule::Intercept), 1).unwrap();
        assert!(fit.theta_hat[0].abs() < 1e-12);
        assert_eq!(fit.n_terms, 12);
        let ll = 12.0 * 0.5f64.ln();
        assert!((fit.loglik - ll).abs() < 1e-12);
        assert!((fit.aic - (-2.0 * ll + 2.0)).abs() < 1e-12);
        assert!((fit.bic - (-2.0 * ll + 12f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn cumulative_product_of_constant_propensity() {
        // intercept-only θ = logit(0.8)
        let theta = (0.8f64 / 0.2).ln();
        let fit = PropensityFit::fixed(PropensitySpec::new(FeatureRule::Intercept), vec![theta]);
        let s = subject(0, &[true; 4], 1.0);
        assert_eq!(fit.pi_cumulative(&s, 0, 1), 1.0);
        assert!((fit.pi_cumulative(&s, 1, 1) - 0.8).abs() < 1e-12);
        assert!((fit.pi_cumulative(&s, 2, 1) - 0.64).abs() < 1e-12);
        assert!((fit.pi_cumulative(&s, 3, 2) - 0.512).abs() < 1e-12);
    }

    #[test]
    fn tiny_propensity_is_floored() {
        let fit = PropensityFit::fixed(PropensitySpec::new(FeatureRule::Intercept), vec![-50.0]);
        let s = subject(0, &[true; 3], 1.0);
        assert_eq!(fit.pi_cumulative(&s, 2, 1), PI_FLOOR);
    }

    #[test]
    fn mechanism_two_features() {
        let s = subject(0, &[true; 4], 1.5);
        let rule = FeatureRule::LagCovariateResponseDiff {
            covariate: 0,
            intercept: false,
        };
        assert_eq!(rule.features(&History::new(&s.records, 1)), vec![1.5, 0.0]);
        // responses are the visit indices
        assert_eq!(rule.features(&History::new(&s.records, 3)), vec![1.5, 1.0]);
    }

    #[test]
    fn m_rules_zero_fill_early_lags() {
        let s = subject(0, &[true; 5], 2.0);
        assert_eq!(
            FeatureRule::M2.features(&History::new(&s.records, 1)),
            vec![1.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(
            FeatureRule::M3.features(&History::new(&s.records, 4)),
            vec![1.0, 3.0, 2.0, 1.0, 9.0, 6.0]
        );
        assert_eq!(
            FeatureRule::M1 { covariate: 0 }.features(&History::new(&s.records, 2)),
            vec![2.0, 1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn identical_specs_tie_in_listing_order() {
        let pattern = [true, true, false];
        let s = sample((0..6).map(|i| subject(i, &pattern, i as f64)).collect());
        let a = PropensitySpec::new(FeatureRule::LagCovariate {
            covariate: 0,
            intercept: true,
        });
        let table = compare_propensity_models(&s, &[a.clone(), a], 1).unwrap();
        assert_eq!(table[0].aic, table[1].aic);
        assert_eq!(table[0].delta_bic, Some(0.0));
        assert_eq!(table[1].delta_bic, Some(0.0));
    }

    #[test]
    fn failed_fit_stays_in_table() {
        let s = sample((0..5).map(|i| subject(i, &[true; 4], i as f64)).collect());
        let table = compare_propensity_models(
            &s,
            &[
                PropensitySpec::new(FeatureRule::Intercept),
                PropensitySpec::new(FeatureRule::M2),
            ],
            1,
        )
        .unwrap();
        assert_eq!(table.len(), 2);
        assert!(table.iter().all(|r| r.error.is_some()));
    }
}
