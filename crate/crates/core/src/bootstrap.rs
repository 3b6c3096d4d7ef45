//! Wild bootstrap calibration of the integrated time-effect statistic.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariate::study_meta;
use crate::data::{ObservationRecord, Study, SubjectTrajectory, TreatmentSample};
use crate::error::{Error, Result};
use crate::frame::SampleFrame;
use crate::kernel::{Kernel, Smoother};
use crate::propensity::{fit_if_missing, History, PropensitySpec};
use crate::report::TestReport;
use crate::rng;
use crate::time_effect::{
    infeasible_report, integrated_statistic, CurveEstimate, IntegratedStatConfig, SampleCurves,
    TimeEffectFit,
};

pub const VARIANCE_FLOOR: f64 = 1e-8;
pub const EIGEN_FLOOR: f64 = 1e-10;
const RHO_CLAMP: f64 = 0.99;
/// Largest tolerated fraction of failed replicates.
pub const MAX_FAILURE_RATE: f64 = 0.10;

/// Mean-zero, unit-variance multiplier law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WildDist {
    #[default]
    Mammen,
    Rademacher,
    Normal,
}

impl WildDist {
    pub fn draw<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            WildDist::Mammen => {
                let s5 = 5f64.sqrt();
                let p_low = (s5 + 1.0) / (2.0 * s5);
                if rng.random::<f64>() < p_low {
                    (1.0 - s5) / 2.0
                } else {
                    (1.0 + s5) / 2.0
                }
            }
            WildDist::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            WildDist::Normal => StandardNormal.sample(rng),
        }
    }
}

impl std::str::FromStr for WildDist {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mammen" => Ok(WildDist::Mammen),
            "rademacher" => Ok(WildDist::Rademacher),
            "normal" => Ok(WildDist::Normal),
            _ => Err(Error::InvalidInput(format!(
                "unknown wild distribution {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub reps: usize,
    pub wild: WildDist,
    pub seed: u64,
    pub level: f64,
    /// Correlation bandwidth as a multiple of the smoothing bandwidth.
    pub corr_bandwidth_factor: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            reps: 500,
            wild: WildDist::Mammen,
            seed: 0,
            level: 0.05,
            corr_bandwidth_factor: 2.0,
        }
    }
}

pub const MIN_REPS: usize = 50;

/// `σ̂²(t) = Σ w(t) ε̂²`, floored.
pub struct ResidualVariance<'a> {
    smoother: Smoother<'a>,
    sq: Vec<f64>,
}

impl<'a> ResidualVariance<'a> {
    pub fn new(frame: &'a SampleFrame, kernel: Kernel, h: f64, eps: &[f64]) -> Self {
        ResidualVariance {
            smoother: Smoother::new(frame, kernel, h),
            sq: eps.iter().map(|e| e * e).collect(),
        }
    }

    pub fn at(&self, t: f64) -> Result<f64> {
        Ok(self.smoother.smooth(t, &self.sq)?.max(VARIANCE_FLOOR))
    }

    /// As [`Self::at`], falling back to the nearest observed time when the window is empty.
    pub fn at_or_nearest(&self, t: f64) -> f64 {
        self.at(t).unwrap_or_else(|_| {
            let near = nearest_time(self.smoother.frame(), t);
            self.at(near).expect("observed time has a nonempty window")
        })
    }
}

fn nearest_time(frame: &SampleFrame, t: f64) -> f64 {
    frame
        .time
        .iter()
        .copied()
        .min_by(|a, b| (a - t).abs().total_cmp(&(b - t).abs()))
        .expect("frame has observations")
}

#[derive(Debug, Clone, Copy)]
struct Pair {
    s: f64,
    t: f64,
    w: f64,
    prod: f64,
}

/// Kernel estimate of the within-subject correlation of standardized residuals.
#[derive(Debug, Clone)]
pub struct ResidualCorrelation {
    pairs: Vec<Pair>,
    kernel: Kernel,
    b: f64,
}

impl ResidualCorrelation {
    /// `std_resid` holds `ê = ε̂ / σ̂(t)` for each frame row. Pairs within `d` visits
    /// share the later visit's propensity; farther pairs use the product.
    pub fn new(
        frame: &SampleFrame,
        std_resid: &[f64],
        lag_d: usize,
        kernel: Kernel,
        b: f64,
    ) -> Self {
        assert!(b > 0.0);
        let mut pairs = Vec::new();
        for i in 0..frame.n_subjects {
            let rows = frame.subject_rows(i);
            for a in rows.clone() {
                for c in rows.clone() {
                    if a == c {
                        continue;
                    }
                    let gap = frame.visit[a].abs_diff(frame.visit[c]);
                    let w = if gap > lag_d {
                        frame.ipw[a] * frame.ipw[c]
                    } else if frame.visit[a] > frame.visit[c] {
                        frame.ipw[a]
                    } else {
                        frame.ipw[c]
                    };
                    pairs.push(Pair {
                        s: frame.time[a],
                        t: frame.time[c],
                        w,
                        prod: std_resid[a] * std_resid[c],
                    });
                }
            }
        }
        pairs.sort_by(|x, y| x.s.total_cmp(&y.s));
        ResidualCorrelation { pairs, kernel, b }
    }

    pub fn bandwidth(&self) -> f64 {
        self.b
    }

    /// `ρ̂(s, t)`, clamped to `[-0.99, 0.99]`.
    pub fn at(&self, s: f64, t: f64) -> Result<f64> {
        let lo = self.pairs.partition_point(|p| p.s <= s - self.b);
        let hi = self.pairs.partition_point(|p| p.s < s + self.b);
        let mut num = 0.0;
        let mut den = 0.0;
        for p in &self.pairs[lo..hi.max(lo)] {
            let k = self.kernel.eval((s - p.s) / self.b) * self.kernel.eval((t - p.t) / self.b);
            if k > 0.0 {
                num += p.w * k * p.prod;
                den += p.w * k;
            }
        }
        if den <= 0.0 {
            return Err(Error::EmptyWindow { t: s });
        }
        Ok((num / den).clamp(-RHO_CLAMP, RHO_CLAMP))
    }
}

/// Covariance of one subject's errors at all scheduled visits, with its factor.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectCovariance {
    pub sigma_diag: Vec<f64>,
    pub correlation: DMatrix<f64>,
    pub matrix: DMatrix<f64>,
    /// Lower-triangular `L` with `L Lᵀ = matrix`.
    pub factor: DMatrix<f64>,
}

impl SubjectCovariance {
    /// Assembles `diag(σ) R diag(σ)`, clips eigenvalues at `1e-10`, and factors.
    pub fn new(sigma: &[f64], correlation: DMatrix<f64>) -> Self {
        let t = sigma.len();
        assert_eq!(correlation.shape(), (t, t));
        let raw = DMatrix::from_fn(t, t, |a, b| {
            let r = if a == b {
                1.0
            } else {
                0.5 * (correlation[(a, b)] + correlation[(b, a)])
            };
            r * sigma[a] * sigma[b]
        });
        let matrix = project_psd(raw);
        let factor = cholesky_lower(&matrix);
        SubjectCovariance {
            sigma_diag: sigma.to_vec(),
            correlation,
            matrix,
            factor,
        }
    }

    pub fn apply(&self, e: &[f64]) -> Vec<f64> {
        let t = e.len();
        (0..t)
            .map(|a| (0..=a).map(|b| self.factor[(a, b)] * e[b]).sum())
            .collect()
    }
}

/// Nearest matrix with eigenvalues at least `EIGEN_FLOOR`, when any falls below it.
pub fn project_psd(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().all(|&l| l >= EIGEN_FLOOR) {
        return m;
    }
    let clipped = eig.eigenvalues.map(|l| l.max(EIGEN_FLOOR));
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&clipped) * v.transpose();
    // restore exact symmetry lost to rounding
    (&out + out.transpose()) * 0.5
}

fn cholesky_lower(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut jitter = 0.0;
    loop {
        let shifted = m + DMatrix::identity(m.nrows(), m.ncols()) * jitter;
        if let Some(c) = shifted.cholesky() {
            return c.l();
        }
        jitter = if jitter == 0.0 {
            EIGEN_FLOOR
        } else {
            jitter * 10.0
        };
    }
}

/// Completed covariates `X^c`: observed values where recorded, the kernel smooth otherwise.
pub fn impute_missing_covariates(
    sample: &TreatmentSample,
    frame: &SampleFrame,
    kernel: Kernel,
    h: f64,
) -> Vec<Vec<Vec<f64>>> {
    let p = frame.p;
    let sm = Smoother::new(frame, kernel, h);
    let mut buf = vec![0.0; p];
    sample
        .subjects
        .iter()
        .map(|s| {
            s.records
                .iter()
                .map(|r| match &r.covariates {
                    Some(x) => x.clone(),
                    None => {
                        if p > 0 && sm.smooth_rows(r.time, &frame.x, p, &mut buf).is_err() {
                            let near = nearest_time(frame, r.time);
                            log::warn!(
                                "no observed covariates near t = {}; imputing from t = {near}",
                                r.time
                            );
                            sm.smooth_rows(near, &frame.x, p, &mut buf)
                                .expect("observed time has a nonempty window");
                        }
                        buf.clone()
                    }
                })
                .collect()
        })
        .collect()
}

/// Everything a resample needs from the original data, computed once.
pub struct BootstrapPlan {
    samples: Vec<PlanSample>,
    study: Study,
    stat: IntegratedStatConfig,
    wild: WildDist,
}

struct PlanSample {
    /// Completed covariates per subject and visit.
    xc: Vec<Vec<Vec<f64>>>,
    /// `𝕏^cᵀξ̂_j + ĝ₁(t)` per subject and visit.
    mean: Vec<Vec<f64>>,
    cov: Vec<SubjectCovariance>,
    spec: Option<PropensitySpec>,
    theta: Option<Vec<f64>>,
}

fn curve_at(c: &SampleCurves, fallback: &CurveEstimate, t: f64) -> f64 {
    c.g_hat(t).unwrap_or_else(|_| fallback.interpolate(t))
}

impl BootstrapPlan {
    pub fn new(
        study: &Study,
        fit: &TimeEffectFit,
        stat: &IntegratedStatConfig,
        cfg: &BootstrapConfig,
    ) -> Result<Self> {
        let null_curve = &fit.samples[0];
        let fine: Vec<f64> = (0..=200).map(|i| i as f64 / 200.0).collect();
        let null_fallback = null_curve.curve_bias_corrected(&fine);
        let mut samples = Vec::with_capacity(study.k());
        for (sample, curves) in study.samples.iter().zip(&fit.samples) {
            let frame = &curves.frame;
            let xc = impute_missing_covariates(sample, frame, curves.kernel, curves.h);
            let eps: Vec<f64> = (0..frame.len())
                .map(|b| Ok(curves.resid[b] - curves.g_hat(frame.time[b])?))
                .collect::<Result<_>>()?;
            let var = ResidualVariance::new(frame, curves.kernel, curves.h, &eps);
            let std_resid: Vec<f64> = (0..frame.len())
                .map(|b| eps[b] / var.at_or_nearest(frame.time[b]).sqrt())
                .collect();
            let corr = ResidualCorrelation::new(
                frame,
                &std_resid,
                study.lag_d,
                curves.kernel,
                cfg.corr_bandwidth_factor * curves.h,
            );
            let mut mean = Vec::with_capacity(sample.n());
            let mut cov = Vec::with_capacity(sample.n());
            for (s, x) in sample.subjects.iter().zip(&xc) {
                let times: Vec<f64> = s.records.iter().map(|r| r.time).collect();
                let mu: Vec<f64> = times
                    .iter()
                    .zip(x)
                    .map(|(&t, xv)| {
                        let m = study.interaction.eval(xv, t);
                        let lin: f64 = xv
                            .iter()
                            .chain(&m)
                            .zip(&curves.xi)
                            .map(|(a, b)| a * b)
                            .sum();
                        lin + curve_at(null_curve, &null_fallback, t)
                    })
                    .collect();
                let sigma: Vec<f64> = times.iter().map(|&t| var.at_or_nearest(t).sqrt()).collect();
                let tn = times.len();
                let r = DMatrix::from_fn(tn, tn, |a, b| {
                    if a == b {
                        1.0
                    } else {
                        corr.at(times[a], times[b]).unwrap_or(0.0)
                    }
                });
                mean.push(mu);
                cov.push(SubjectCovariance::new(&sigma, r));
            }
            samples.push(PlanSample {
                xc,
                mean,
                cov,
                spec: sample.propensity.as_ref().map(|f| f.spec.clone()),
                theta: sample.propensity.as_ref().map(|f| f.theta_hat.clone()),
            });
        }
        Ok(BootstrapPlan {
            samples,
            study: study.clone(),
            stat: stat.clone(),
            wild: cfg.wild,
        })
    }

    /// Resample `b` under the common-curve null, with propensities refitted.
    pub fn resample(&self, seed: u64, b: u64) -> Result<Study> {
        let mut r = rng::stream(seed, b, rng::stage::WILD);
        let d = self.study.lag_d;
        let mut out = self.study.clone();
        for (sample, plan) in out.samples.iter_mut().zip(&self.samples) {
            for (i, subj) in sample.subjects.iter_mut().enumerate() {
                let t_len = subj.len();
                let e: Vec<f64> = (0..t_len).map(|_| self.wild.draw(&mut r)).collect();
                let noise = plan.cov[i].apply(&e);
                let mut recs: Vec<ObservationRecord> = subj
                    .records
                    .iter()
                    .enumerate()
                    .map(|(m, rec)| ObservationRecord {
                        covariates: Some(plan.xc[i][m].clone()),
                        response: Some(plan.mean[i][m] + noise[m]),
                        observed: true,
                        ..rec.clone()
                    })
                    .collect();
                // sequential δ*: a visit is drawn only when its lag window is complete
                // one uniform per visit whatever the branch, so π ≡ 1 replays the complete-data stream
                for m in 1..t_len {
                    let u = r.random::<f64>();
                    let lag_ok = (1..=d.min(m)).all(|l| recs[m - l].observed);
                    let keep = lag_ok
                        && match (&plan.spec, &plan.theta) {
                            (Some(spec), Some(theta)) => {
                                u < spec.probability(&History::new(&recs, m), theta)
                            }
                            _ => true,
                        };
                    if !keep {
                        recs[m].observed = false;
                        recs[m].response = None;
                        recs[m].covariates = None;
                    }
                }
                *subj = SubjectTrajectory::new(subj.subject_id, recs, d);
            }
            sample.propensity = match &plan.spec {
                Some(spec) => fit_if_missing(sample, spec, d)?,
                None => None,
            };
        }
        Ok(out)
    }

    /// `𝒯ₙ*` of resample `b`.
    pub fn replicate(&self, seed: u64, b: u64) -> Result<f64> {
        let study = self.resample(seed, b)?;
        let fit = TimeEffectFit::new(&study, &self.stat)?;
        Ok(integrated_statistic(&fit, &self.stat)?.statistic)
    }
}

/// Freezes the bandwidths so resamples reuse the original data's choices.
fn with_fixed_bandwidths(study: &Study) -> Study {
    let mut s = study.clone();
    for (sample, h) in s
        .samples
        .iter_mut()
        .zip(crate::covariate::bandwidths(study))
    {
        sample.bandwidth = Some(h);
    }
    s
}

/// Rejects the common-curve null when `𝒯ₙ` exceeds the bootstrap `(1 - α)` quantile.
pub fn bootstrap_timeeffect_test(
    study: &Study,
    cfg: &BootstrapConfig,
    stat: &IntegratedStatConfig,
) -> Result<TestReport> {
    if cfg.reps < MIN_REPS {
        return Err(Error::InvalidInput(format!(
            "bootstrap needs at least {MIN_REPS} replicates, got {}",
            cfg.reps
        )));
    }
    let study = with_fixed_bandwidths(study);
    let fit = TimeEffectFit::new(&study, stat)?;
    let observed = match integrated_statistic(&fit, stat) {
        Err(Error::NoFeasibleG { t }) => {
            // 𝒯ₙ = ∞ exceeds every draw, so no resampling is needed
            let mut r = infeasible_report("g_bootstrap", &study, t);
            r.null = crate::report::NullDistribution::Bootstrap { draws: Vec::new() };
            r.meta.seed = Some(cfg.seed);
            r.meta.extra.insert("reps".into(), serde_json::json!(0));
            return Ok(r);
        }
        r => r?.statistic,
    };
    let plan = BootstrapPlan::new(&study, &fit, stat, cfg)?;
    let results: Vec<Result<f64>> = (0..cfg.reps as u64)
        .into_par_iter()
        .map(|b| plan.replicate(cfg.seed, b))
        .collect();
    let mut draws = Vec::with_capacity(cfg.reps);
    let mut failures = 0;
    let mut infeasible = 0;
    for r in results {
        match r {
            Ok(v) => draws.push(v),
            // same convention as the observed statistic: no common curve fits, so 𝒯* = ∞
            Err(Error::NoFeasibleG { .. }) => {
                infeasible += 1;
                draws.push(f64::INFINITY);
            }
            Err(e) => {
                log::debug!("bootstrap replicate failed: {e}");
                failures += 1;
            }
        }
    }
    if failures as f64 > MAX_FAILURE_RATE * cfg.reps as f64 {
        return Err(Error::TooManyFailures {
            failures,
            reps: cfg.reps,
        });
    }
    let mut report = TestReport::bootstrap("g_bootstrap", observed, draws);
    let mut meta = study_meta(&study);
    meta.seed = Some(cfg.seed);
    meta.extra
        .insert("reps".into(), serde_json::json!(cfg.reps));
    meta.extra
        .insert("failures".into(), serde_json::json!(failures));
    meta.extra
        .insert("infeasible_draws".into(), serde_json::json!(infeasible));
    meta.extra
        .insert("wild".into(), serde_json::json!(cfg.wild));
    meta.extra.insert(
        "critical_value".into(),
        serde_json::json!(crate::report::bootstrap_critical_value(
            match &report.null {
                crate::report::NullDistribution::Bootstrap { draws } => draws,
                _ => unreachable!(),
            },
            cfg.level
        )),
    );
    report.meta = meta;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn wild_laws_have_unit_moments() {
        for w in [WildDist::Mammen, WildDist::Rademacher, WildDist::Normal] {
            let mut r = ChaCha8Rng::seed_from_u64(11);
            let n = 200_000;
            let xs: Vec<f64> = (0..n).map(|_| w.draw(&mut r)).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 3.0 / (n as f64).sqrt(), "{w:?} mean {mean}");
            assert!((var - 1.0).abs() < 0.1, "{w:?} var {var}");
        }
    }

    #[test]
    fn mammen_third_moment_is_one() {
        let s5 = 5f64.sqrt();
        let (a, b) = ((1.0 - s5) / 2.0, (1.0 + s5) / 2.0);
        let pa = (s5 + 1.0) / (2.0 * s5);
        assert!((pa * a + (1.0 - pa) * b).abs() < 1e-15);
        assert!((pa * a * a + (1.0 - pa) * b * b - 1.0).abs() < 1e-15);
        assert!((pa * a.powi(3) + (1.0 - pa) * b.powi(3) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn zero_correlation_gives_diagonal_factor() {
        let c = SubjectCovariance::new(&[0.5, 1.0, 2.0], DMatrix::identity(3, 3));
        assert_eq!(
            c.factor,
            DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.5, 1.0, 2.0]))
        );
    }

    #[test]
    fn exchangeable_factor_round_trips() {
        let r = DMatrix::from_fn(3, 3, |a, b| if a == b { 1.0 } else { 0.5 });
        let c = SubjectCovariance::new(&[1.0; 3], r.clone());
        let back = &c.factor * c.factor.transpose();
        assert!((back - r).abs().max() < 1e-12);
        for a in 0..3 {
            for b in a + 1..3 {
                assert_eq!(c.factor[(a, b)], 0.0);
            }
        }
    }

    #[test]
    fn indefinite_matrix_is_projected() {
        // pairwise correlations that cannot hold jointly
        let r =
            DMatrix::from_row_slice(3, 3, &[1.0, 0.99, -0.99, 0.99, 1.0, 0.99, -0.99, 0.99, 1.0]);
        let c = SubjectCovariance::new(&[1.0; 3], r);
        let eig = SymmetricEigen::new(c.matrix.clone());
        assert!(eig.eigenvalues.iter().all(|&l| l >= EIGEN_FLOOR * 0.999));
        let back = &c.factor * c.factor.transpose();
        assert!((back - &c.matrix).abs().max() < 1e-9);
    }

    fn frame(subjects: &[usize], visits: &[usize], times: &[f64], y: &[f64]) -> SampleFrame {
        let n = times.len();
        SampleFrame::from_columns(
            subjects.to_vec(),
            visits.to_vec(),
            times.to_vec(),
            vec![1.0; n],
            vec![],
            0,
            vec![],
            0,
            y.to_vec(),
        )
    }

    #[test]
    fn variance_scales_quadratically_and_floors() {
        let t: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
        let s: Vec<usize> = (0..20).map(|i| i / 4).collect();
        let v: Vec<usize> = (0..20).map(|i| i % 4).collect();
        let f = frame(&s, &v, &t, &[0.0; 20]);
        let eps: Vec<f64> = t.iter().map(|x| x - 0.5).collect();
        let twice: Vec<f64> = eps.iter().map(|e| 2.0 * e).collect();
        let a = ResidualVariance::new(&f, Kernel::Epanechnikov, 0.3, &eps)
            .at(0.4)
            .unwrap();
        let b = ResidualVariance::new(&f, Kernel::Epanechnikov, 0.3, &twice)
            .at(0.4)
            .unwrap();
        assert!((b - 4.0 * a).abs() < 1e-14);
        let z = ResidualVariance::new(&f, Kernel::Epanechnikov, 0.3, &[0.0; 20])
            .at(0.4)
            .unwrap();
        assert_eq!(z, VARIANCE_FLOOR);
    }

    #[test]
    fn correlation_is_symmetric() {
        let t: Vec<f64> = (0..30).map(|i| ((i * 17) % 30) as f64 / 29.0).collect();
        let s: Vec<usize> = (0..30).map(|i| i / 3).collect();
        let v: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let f = frame(&s, &v, &t, &[0.0; 30]);
        let e: Vec<f64> = (0..30).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let c = ResidualCorrelation::new(&f, &e, 1, Kernel::Epanechnikov, 0.5);
        for (a, b) in [(0.2, 0.7), (0.4, 0.5), (0.9, 0.1)] {
            assert!((c.at(a, b).unwrap() - c.at(b, a).unwrap()).abs() < 1e-14);
        }
    }
}
