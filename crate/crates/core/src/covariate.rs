//! Subject-level estimating functions and the tests on the parametric part:
//! equality of covariate effects, presence of the interaction, equality of interaction effects.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{default_bandwidth, Study};
use crate::dist::{chi_square_quantile, noncentral_chi_square_sf};
use crate::el::{neg2_log_el, profile_minimize, solve_lambda, ProfileResult};
use crate::error::{Error, Result};
use crate::frame::SampleFrame;
use crate::kernel::{Kernel, Smoother};
use crate::report::{ReportMeta, TestReport};

/// Centered per-visit quantities of one treatment sample.
#[derive(Debug, Clone)]
pub struct EstimatingContext {
    pub p: usize,
    pub q: usize,
    pub n_subjects: usize,
    pub bandwidth: f64,
    /// `δ/π` per observed visit.
    pub ipw: Vec<f64>,
    /// Row-major `N × p`.
    pub xt: Vec<f64>,
    /// Row-major `N × q`.
    pub mt: Vec<f64>,
    pub yt: Vec<f64>,
    subject_rows: Vec<std::ops::Range<usize>>,
}

impl EstimatingContext {
    pub fn new(frame: &SampleFrame, kernel: Kernel, h: f64) -> Result<Self> {
        let sm = Smoother::new(frame, kernel, h);
        let d = frame.dim();
        let centered = sm.center_rows(&frame.design(), d)?;
        let yt = sm.center_rows(&frame.y, 1)?;
        let n = frame.len();
        let mut xt = Vec::with_capacity(n * frame.p);
        let mut mt = Vec::with_capacity(n * frame.q);
        for a in 0..n {
            xt.extend_from_slice(&centered[a * d..a * d + frame.p]);
            mt.extend_from_slice(&centered[a * d + frame.p..(a + 1) * d]);
        }
        Ok(EstimatingContext {
            p: frame.p,
            q: frame.q,
            n_subjects: frame.n_subjects,
            bandwidth: h,
            ipw: frame.ipw.clone(),
            xt,
            mt,
            yt,
            subject_rows: (0..frame.n_subjects)
                .map(|i| frame.subject_rows(i))
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.yt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.yt.is_empty()
    }

    /// Moments for `β` with `γ̃(β)` profiled out.
    pub fn beta_moments(&self) -> Result<AffineMoments> {
        affine_moments(
            &self.subject_rows,
            &self.ipw,
            &self.xt,
            self.p,
            &self.mt,
            self.q,
            &self.yt,
            true,
        )
        .map_err(|_| Error::SingularSystem("gamma_tilde"))
    }

    /// Moments `φ_i(γ)` with `β̃(γ)` profiled out.
    pub fn gamma_moments(&self) -> Result<AffineMoments> {
        affine_moments(
            &self.subject_rows,
            &self.ipw,
            &self.mt,
            self.q,
            &self.xt,
            self.p,
            &self.yt,
            true,
        )
        .map_err(|_| Error::SingularSystem("beta_tilde"))
    }

    /// `γ̃(β)`, the exact root of `Σ w M̃(Ỹ - X̃ᵀβ - M̃ᵀγ) = 0`.
    pub fn gamma_tilde(&self, beta: &[f64]) -> Result<Vec<f64>> {
        nuisance_solve(
            &self.ipw, &self.mt, self.q, &self.xt, self.p, &self.yt, beta,
        )
        .ok_or(Error::SingularSystem("gamma_tilde"))
    }

    /// `β̃(γ)`, the weighted least-squares solution at fixed `γ`.
    pub fn beta_tilde(&self, gamma: &[f64]) -> Result<Vec<f64>> {
        nuisance_solve(
            &self.ipw, &self.xt, self.p, &self.mt, self.q, &self.yt, gamma,
        )
        .ok_or(Error::SingularSystem("beta_tilde"))
    }

    /// Per-subject `Z_i(β) = Σ w X̃(Ỹ - X̃ᵀβ - M̃ᵀγ̃(β))`, row-major `n × p`.
    ///
    /// The test statistics use [`beta_moments`](Self::beta_moments) instead, whose
    /// subject terms lead with the projected `X̃`; both have the same sum.
    pub fn estimating_functions_beta(&self, beta: &[f64]) -> Result<Vec<f64>> {
        affine_moments(
            &self.subject_rows,
            &self.ipw,
            &self.xt,
            self.p,
            &self.mt,
            self.q,
            &self.yt,
            false,
        )
        .map(|m| m.eval(beta))
        .map_err(|_| Error::SingularSystem("gamma_tilde"))
    }

    /// Weighted least squares of `Ỹ` on `(X̃, M̃)`: the estimate `ξ̂ = (β̂, γ̂)`.
    pub fn xi_hat(&self) -> Result<Vec<f64>> {
        let d = self.p + self.q;
        let mut s = DMatrix::<f64>::zeros(d, d);
        let mut b = DVector::<f64>::zeros(d);
        let mut row = vec![0.0; d];
        for a in 0..self.len() {
            row[..self.p].copy_from_slice(&self.xt[a * self.p..(a + 1) * self.p]);
            row[self.p..].copy_from_slice(&self.mt[a * self.q..(a + 1) * self.q]);
            let w = self.ipw[a];
            for r in 0..d {
                b[r] += w * row[r] * self.yt[a];
                for c in 0..d {
                    s[(r, c)] += w * row[r] * row[c];
                }
            }
        }
        spd_solve(s, b)
            .map(|v| v.iter().copied().collect())
            .ok_or(Error::SingularSystem("xi_hat"))
    }
}

fn spd_solve(s: DMatrix<f64>, b: DVector<f64>) -> Option<DVector<f64>> {
    if s.nrows() == 0 {
        return Some(DVector::zeros(0));
    }
    match s.clone().cholesky() {
        Some(ch) => Some(ch.solve(&b)),
        None => s.lu().solve(&b),
    }
}

/// Solves `Σ w T(y - Nᵀν - Tᵀτ) = 0` for `τ` at fixed `ν`.
fn nuisance_solve(
    w: &[f64],
    t: &[f64],
    r: usize,
    nu_rows: &[f64],
    s: usize,
    y: &[f64],
    nu: &[f64],
) -> Option<Vec<f64>> {
    let mut stt = DMatrix::<f64>::zeros(r, r);
    let mut rhs = DVector::<f64>::zeros(r);
    for a in 0..y.len() {
        let ta = &t[a * r..(a + 1) * r];
        let na = &nu_rows[a * s..(a + 1) * s];
        let res = y[a] - na.iter().zip(nu).map(|(x, b)| x * b).sum::<f64>();
        for i in 0..r {
            rhs[i] += w[a] * ta[i] * res;
            for j in 0..r {
                stt[(i, j)] += w[a] * ta[i] * ta[j];
            }
        }
    }
    if r > 0 && stt.clone().cholesky().is_none() {
        return None;
    }
    spd_solve(stt, rhs).map(|v| v.iter().copied().collect())
}

/// Subject-level moments that are affine in the tested parameter: `Z_i(θ) = a_i - C_i θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMoments {
    pub n: usize,
    pub r: usize,
    /// Row-major `n × r`.
    pub a: Vec<f64>,
    /// `n` row-major `r × r` blocks.
    pub c: Vec<f64>,
}

impl AffineMoments {
    pub fn eval_into(&self, theta: &[f64], out: &mut [f64]) {
        let r = self.r;
        for i in 0..self.n {
            let blk = &self.c[i * r * r..(i + 1) * r * r];
            for k in 0..r {
                let mut v = self.a[i * r + k];
                for l in 0..r {
                    v -= blk[k * r + l] * theta[l];
                }
                out[i * r + k] = v;
            }
        }
    }

    pub fn eval(&self, theta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.r];
        self.eval_into(theta, &mut out);
        out
    }

    pub fn neg2(&self, theta: &[f64]) -> f64 {
        neg2_log_el(&self.eval(theta), self.r)
    }

    fn mean_parts(&self) -> (DVector<f64>, DMatrix<f64>) {
        let r = self.r;
        let mut abar = DVector::zeros(r);
        let mut cbar = DMatrix::zeros(r, r);
        for i in 0..self.n {
            for k in 0..r {
                abar[k] += self.a[i * r + k];
                for l in 0..r {
                    cbar[(k, l)] += self.c[i * r * r + k * r + l];
                }
            }
        }
        let n = self.n as f64;
        (abar / n, cbar / n)
    }

    /// Root of `Σ Z_i(θ) = 0`.
    pub fn root(&self) -> Option<Vec<f64>> {
        let (abar, cbar) = self.mean_parts();
        cbar.lu().solve(&abar).map(|v| v.iter().copied().collect())
    }

    fn covariance_at(&self, theta: &[f64]) -> DMatrix<f64> {
        let r = self.r;
        let z = self.eval(theta);
        let mut s = DMatrix::zeros(r, r);
        for i in 0..self.n {
            for k in 0..r {
                for l in 0..r {
                    s[(k, l)] += z[i * r + k] * z[i * r + l];
                }
            }
        }
        s / self.n as f64
    }
}

#[allow(clippy::too_many_arguments)]
fn affine_moments(
    subject_rows: &[std::ops::Range<usize>],
    w: &[f64],
    target: &[f64],
    r: usize,
    nuisance: &[f64],
    s: usize,
    y: &[f64],
    project_target: bool,
) -> std::result::Result<AffineMoments, ()> {
    let n_rows = y.len();
    // project the nuisance regressors out of both y and the target
    let (ystar, tstar) = if s > 0 {
        let mut snn = DMatrix::<f64>::zeros(s, s);
        let mut sny = DVector::<f64>::zeros(s);
        let mut snt = DMatrix::<f64>::zeros(s, r);
        for a in 0..n_rows {
            let na = &nuisance[a * s..(a + 1) * s];
            let ta = &target[a * r..(a + 1) * r];
            for i in 0..s {
                sny[i] += w[a] * na[i] * y[a];
                for j in 0..s {
                    snn[(i, j)] += w[a] * na[i] * na[j];
                }
                for j in 0..r {
                    snt[(i, j)] += w[a] * na[i] * ta[j];
                }
            }
        }
        let ch = snn.cholesky().ok_or(())?;
        let gy = ch.solve(&sny);
        let gt = ch.solve(&snt);
        let mut ystar = vec![0.0; n_rows];
        let mut tstar = vec![0.0; n_rows * r];
        for a in 0..n_rows {
            let na = &nuisance[a * s..(a + 1) * s];
            ystar[a] = y[a] - (0..s).map(|i| na[i] * gy[i]).sum::<f64>();
            for j in 0..r {
                tstar[a * r + j] =
                    target[a * r + j] - (0..s).map(|i| na[i] * gt[(i, j)]).sum::<f64>();
            }
        }
        (ystar, tstar)
    } else {
        (y.to_vec(), target.to_vec())
    };
    let n = subject_rows.len();
    let mut a_out = vec![0.0; n * r];
    let mut c_out = vec![0.0; n * r * r];
    // With `project_target` the per-subject moments use the projected target. The sum
    // is unchanged because the weighted residual is orthogonal to the nuisance, but the
    // per-subject spread no longer carries the target's nuisance component.
    let lead = if project_target { &tstar } else { target };
    for (i, rows) in subject_rows.iter().enumerate() {
        for a in rows.clone() {
            let ta = &lead[a * r..(a + 1) * r];
            for k in 0..r {
                let wt = w[a] * ta[k];
                a_out[i * r + k] += wt * ystar[a];
                for l in 0..r {
                    c_out[i * r * r + k * r + l] += wt * tstar[a * r + l];
                }
            }
        }
    }
    Ok(AffineMoments {
        n,
        r,
        a: a_out,
        c: c_out,
    })
}

/// Optimal-weighting one-step combination of the per-sample roots.
pub fn one_step_initializer(moments: &[AffineMoments]) -> Option<Vec<f64>> {
    let r = moments[0].r;
    let mut lhs = DMatrix::<f64>::zeros(r, r);
    let mut rhs = DVector::<f64>::zeros(r);
    for m in moments {
        let (abar, cbar) = m.mean_parts();
        let root = cbar.clone().lu().solve(&abar)?;
        let root: Vec<f64> = root.iter().copied().collect();
        let sinv = m.covariance_at(&root).try_inverse()?;
        let bt = cbar.transpose();
        let n = m.n as f64;
        lhs += &bt * &sinv * &cbar * n;
        rhs += &bt * &sinv * &abar * n;
    }
    lhs.lu().solve(&rhs).map(|v| v.iter().copied().collect())
}

/// Pooled least-squares root `(Σ C_i)⁻¹ Σ a_i`.
pub fn pooled_start(moments: &[AffineMoments]) -> Option<Vec<f64>> {
    let r = moments[0].r;
    let mut lhs = DMatrix::<f64>::zeros(r, r);
    let mut rhs = DVector::<f64>::zeros(r);
    for m in moments {
        let (abar, cbar) = m.mean_parts();
        let n = m.n as f64;
        lhs += cbar * n;
        rhs += abar * n;
    }
    lhs.lu().solve(&rhs).map(|v| v.iter().copied().collect())
}

/// `min_θ Σ_j -2 log EL_j(θ)` over a common parameter.
pub fn joint_profile(moments: &[AffineMoments]) -> Result<ProfileResult> {
    let r = moments[0].r;
    let pooled = pooled_start(moments);
    let init = one_step_initializer(moments)
        .or_else(|| pooled.clone())
        .ok_or(Error::SingularSystem("one-step initializer"))?;
    let mut buf: Vec<Vec<f64>> = moments.iter().map(|m| vec![0.0; m.n * r]).collect();
    let ratio = |theta: &[f64]| -> f64 {
        let mut total = 0.0;
        for (m, z) in moments.iter().zip(buf.iter_mut()) {
            m.eval_into(theta, z);
            total += neg2_log_el(z, r);
            if !total.is_finite() {
                return f64::INFINITY;
            }
        }
        total
    };
    let mut res = profile_minimize(ratio, &init, pooled.as_deref())?;
    res.per_sample = moments
        .iter()
        .map(|m| solve_lambda(&m.eval(&res.argmin), r))
        .collect();
    Ok(res)
}

/// Settings shared by the parametric-part tests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovariateConfig {
    pub kernel: Kernel,
    pub levels: Vec<f64>,
}

impl Default for CovariateConfig {
    fn default() -> Self {
        CovariateConfig {
            kernel: Kernel::Epanechnikov,
            levels: crate::report::DEFAULT_LEVELS.to_vec(),
        }
    }
}

/// Bandwidth of each sample, falling back to the rule of thumb.
pub fn bandwidths(study: &Study) -> Vec<f64> {
    study
        .samples
        .iter()
        .map(|s| s.bandwidth.unwrap_or_else(|| default_bandwidth(s)))
        .collect()
}

pub fn contexts(study: &Study, kernel: Kernel) -> Result<Vec<EstimatingContext>> {
    let hs = bandwidths(study);
    study
        .frames()
        .iter()
        .zip(hs)
        .map(|(f, h)| EstimatingContext::new(f, kernel, h))
        .collect()
}

pub fn study_meta(study: &Study) -> ReportMeta {
    ReportMeta {
        bandwidths: bandwidths(study),
        propensity: study
            .samples
            .iter()
            .map(|s| match &s.propensity {
                Some(f) => f.spec.name(),
                None => "none".into(),
            })
            .collect(),
        seed: None,
        treatments: study.samples.iter().map(|s| s.treatment_id).collect(),
        extra: Default::default(),
    }
}

fn profile_report(
    test: &str,
    moments: &[AffineMoments],
    df: usize,
    study: &Study,
    cfg: &CovariateConfig,
) -> Result<TestReport> {
    let prof = joint_profile(moments)?;
    let mut report = TestReport::chi_square(test, prof.statistic, df);
    report.set_levels(&cfg.levels);
    let mut meta = study_meta(study);
    meta.extra
        .insert("argmin".into(), serde_json::json!(prof.argmin));
    meta.extra
        .insert("converged".into(), serde_json::json!(prof.converged));
    Ok(report.with_meta(meta))
}

/// Equality of covariate effects across treatments; `χ²_{(k-1)p}` reference.
pub fn anova_beta_test(study: &Study, cfg: &CovariateConfig) -> Result<TestReport> {
    if study.k() < 2 {
        return Err(Error::InvalidInput("need at least two treatments".into()));
    }
    let ctxs = contexts(study, cfg.kernel)?;
    let moments = ctxs
        .iter()
        .map(|c| c.beta_moments())
        .collect::<Result<Vec<_>>>()?;
    profile_report("beta", &moments, (study.k() - 1) * study.p, study, cfg)
}

/// Equality of interaction effects across treatments; `χ²_{(k-1)q}` reference.
pub fn anova_gamma_test(study: &Study, cfg: &CovariateConfig) -> Result<TestReport> {
    if study.k() < 2 || study.q() == 0 {
        return Err(Error::InvalidInput(
            "need at least two treatments and a nonempty interaction".into(),
        ));
    }
    let ctxs = contexts(study, cfg.kernel)?;
    let moments = ctxs
        .iter()
        .map(|c| c.gamma_moments())
        .collect::<Result<Vec<_>>>()?;
    profile_report("gamma", &moments, (study.k() - 1) * study.q(), study, cfg)
}

/// Absence of the interaction in treatment `j`: `φ_i(0)` against `χ²_q`.
pub fn interaction_presence_test(
    study: &Study,
    j: usize,
    cfg: &CovariateConfig,
) -> Result<TestReport> {
    let q = study.q();
    if q == 0 {
        return Err(Error::InvalidInput(
            "interaction rule has dimension zero".into(),
        ));
    }
    let sample = study
        .samples
        .get(j)
        .ok_or_else(|| Error::InvalidInput(format!("no treatment at position {j}")))?;
    let frame = sample.frame(&study.interaction, study.p, study.lag_d);
    let h = bandwidths(study)[j];
    let ctx = EstimatingContext::new(&frame, cfg.kernel, h)?;
    let z = ctx.gamma_moments()?.eval(&vec![0.0; q]);
    let stat = solve_lambda(&z, q).into_result()?.neg2logratio;
    let mut report = TestReport::chi_square("interaction", stat, q);
    report.set_levels(&cfg.levels);
    let mut meta = study_meta(study);
    meta.treatments = vec![sample.treatment_id];
    meta.bandwidths = vec![h];
    meta.propensity = vec![meta.propensity[j].clone()];
    Ok(report.with_meta(meta))
}

/// Equality of `(β, η)` across treatments when the baseline is parametric,
/// `g(t) = basis(t)ᵀη`. Moments use the uncentered regressors; `df = (k-1)(p+s)`.
pub fn parametric_g_test<F>(study: &Study, basis: F, cfg: &CovariateConfig) -> Result<TestReport>
where
    F: Fn(f64) -> Vec<f64>,
{
    if study.k() < 2 {
        return Err(Error::InvalidInput("need at least two treatments".into()));
    }
    let s = basis(0.5).len();
    let p = study.p;
    let r = p + s;
    let mut moments = Vec::new();
    for frame in study.frames() {
        let mut target = Vec::with_capacity(frame.len() * r);
        for a in 0..frame.len() {
            target.extend_from_slice(&frame.x[a * p..(a + 1) * p]);
            target.extend(basis(frame.time[a]));
        }
        let rows: Vec<_> = (0..frame.n_subjects)
            .map(|i| frame.subject_rows(i))
            .collect();
        let m = affine_moments(
            &rows, &frame.ipw, &target, r, &frame.m, frame.q, &frame.y, true,
        )
        .map_err(|_| Error::SingularSystem("parametric baseline"))?;
        moments.push(m);
    }
    let mut rep = profile_report(
        "beta_parametric_g",
        &moments,
        (study.k() - 1) * r,
        study,
        cfg,
    )?;
    rep.meta
        .extra
        .insert("basis_dim".into(), serde_json::json!(s));
    Ok(rep)
}

/// Input to the local power approximation.
#[derive(Debug, Clone)]
pub struct LocalPowerInput {
    /// Stacked `(k-1)p` departure vector.
    pub delta_beta: Vec<f64>,
    pub sigma_d: DMatrix<f64>,
    pub level: f64,
}

/// `P{χ²_df(γ²) > χ²_{df,1-α}}` with `γ² = Δᵀ Σ_D⁻¹ Δ`.
pub fn local_power_beta(input: &LocalPowerInput) -> Result<f64> {
    let df = input.delta_beta.len();
    let sym = (&input.sigma_d - input.sigma_d.transpose()).amax();
    if input.sigma_d.nrows() != df || sym > 1e-10 * input.sigma_d.amax().max(1.0) {
        return Err(Error::SingularSigmaD);
    }
    let ch = input
        .sigma_d
        .clone()
        .cholesky()
        .ok_or(Error::SingularSigmaD)?;
    let delta = DVector::from_column_slice(&input.delta_beta);
    let nc = delta.dot(&ch.solve(&delta));
    Ok(noncentral_chi_square_sf(
        chi_square_quantile(1.0 - input.level, df),
        df,
        nc,
    ))
}

/// Marginal confidence set for coordinate `coord` of one sample's `β`, by inverting the
/// profiled EL statistic on a grid. A utility, not a refined interval method.
pub fn coefficient_interval(
    moments: &AffineMoments,
    coord: usize,
    level: f64,
    grid: &[f64],
) -> Option<(f64, f64)> {
    let crit = chi_square_quantile(level, 1);
    let r = moments.r;
    let root = moments.root()?;
    let mut accepted = Vec::new();
    for &v in grid {
        let stat = if r == 1 {
            moments.neg2(&[v])
        } else {
            let others: Vec<f64> = (0..r).filter(|&k| k != coord).map(|k| root[k]).collect();
            let full = |rest: &[f64]| {
                let mut theta = Vec::with_capacity(r);
                let mut it = rest.iter();
                for k in 0..r {
                    theta.push(if k == coord { v } else { *it.next().unwrap() });
                }
                theta
            };
            profile_minimize(|rest| moments.neg2(&full(rest)), &others, None)
                .map(|p| p.statistic)
                .unwrap_or(f64::INFINITY)
        };
        if stat <= crit {
            accepted.push(v);
        }
    }
    let lo = accepted.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = accepted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo <= hi).then_some((lo, hi))
}
