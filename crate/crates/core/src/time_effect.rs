//! Tests on the nonparametric baseline curves: pointwise EL ratio, integrated
//! statistic, asymptotic normal calibration and the cumulative-difference comparator.

use serde::{Deserialize, Serialize};

use crate::covariate::{bandwidths, contexts, study_meta};
use crate::data::Study;
use crate::dist::normal_quantile;
use crate::el::solve_scalar_from;
use crate::error::{Error, Result};
use crate::frame::SampleFrame;
use crate::kernel::{Kernel, Smoother};
use crate::quadrature::masked_trapezoid_weights;
use crate::report::TestReport;

/// Probability weight `ϖ` over `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightFn {
    Uniform,
    /// Kernel density of all observed visit times, pooled over treatments.
    PooledTimeKde,
    /// Piecewise-linear interpolation of a user table.
    Table {
        times: Vec<f64>,
        values: Vec<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntegratedStatConfig {
    pub grid_size: usize,
    pub weight_fn: WeightFn,
    /// Mask grid points with an empty kernel window in some sample instead of failing.
    pub restrict_to_valid: bool,
    pub kernel: Kernel,
    /// Skip the parametric part (`ξ̂ = 0`), for purely nonparametric data.
    pub zero_xi: bool,
}

impl Default for IntegratedStatConfig {
    fn default() -> Self {
        IntegratedStatConfig {
            grid_size: 101,
            weight_fn: WeightFn::PooledTimeKde,
            restrict_to_valid: true,
            kernel: Kernel::Epanechnikov,
            zero_xi: false,
        }
    }
}

impl IntegratedStatConfig {
    pub fn grid(&self) -> Vec<f64> {
        let n = self.grid_size.max(2);
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }
}

/// A curve evaluated on a grid; `valid` marks points with nonempty kernel windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveEstimate {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl CurveEstimate {
    /// Linear interpolation over valid points; nearest valid value outside them.
    pub fn interpolate(&self, t: f64) -> f64 {
        let pts: Vec<(f64, f64)> = self
            .grid
            .iter()
            .zip(&self.values)
            .zip(&self.valid)
            .filter(|(_, v)| **v)
            .map(|((g, y), _)| (*g, *y))
            .collect();
        if pts.is_empty() {
            return 0.0;
        }
        if t <= pts[0].0 {
            return pts[0].1;
        }
        if t >= pts[pts.len() - 1].0 {
            return pts[pts.len() - 1].1;
        }
        let k = pts.partition_point(|p| p.0 <= t);
        let (t0, y0) = pts[k - 1];
        let (t1, y1) = pts[k];
        y0 + (y1 - y0) * (t - t0) / (t1 - t0)
    }
}

/// Residual curves of one treatment after removing the parametric part.
#[derive(Debug, Clone)]
pub struct SampleCurves {
    pub frame: SampleFrame,
    pub kernel: Kernel,
    pub h: f64,
    pub xi: Vec<f64>,
    /// `Y - 𝕏ᵀξ̂` per observed visit.
    pub resid: Vec<f64>,
    /// `g̃(t_b)` per observed visit.
    pub g_tilde_obs: Vec<f64>,
}

impl SampleCurves {
    pub fn new(frame: SampleFrame, kernel: Kernel, h: f64, xi: Vec<f64>) -> Result<Self> {
        let d = frame.dim();
        assert_eq!(xi.len(), d);
        let design = frame.design();
        let resid: Vec<f64> = (0..frame.len())
            .map(|a| {
                frame.y[a]
                    - design[a * d..(a + 1) * d]
                        .iter()
                        .zip(&xi)
                        .map(|(x, b)| x * b)
                        .sum::<f64>()
            })
            .collect();
        let sm = Smoother::new(&frame, kernel, h);
        let g_tilde_obs = frame
            .time
            .iter()
            .map(|&t| sm.smooth(t, &resid))
            .collect::<Result<Vec<_>>>()?;
        Ok(SampleCurves {
            frame,
            kernel,
            h,
            xi,
            resid,
            g_tilde_obs,
        })
    }

    fn smoother(&self) -> Smoother<'_> {
        Smoother::new(&self.frame, self.kernel, self.h)
    }

    /// Plug-in curve `g̃(t) = Σ w(t)(Y - 𝕏ᵀξ̂)`.
    pub fn g_tilde(&self, t: f64) -> Result<f64> {
        self.smoother().smooth(t, &self.resid)
    }

    /// Bias-corrected curve `ĝ(t) = Σ w(t){Y - 𝕏ᵀξ̂ - (g̃(t_b) - g̃(t))}`.
    pub fn g_hat(&self, t: f64) -> Result<f64> {
        let sm = self.smoother();
        let gt = sm.smooth(t, &self.resid)?;
        let corr = sm.smooth(t, &self.g_tilde_obs)?;
        Ok(2.0 * gt - corr)
    }

    pub fn curve_plugin(&self, grid: &[f64]) -> CurveEstimate {
        self.curve(grid, |t| self.g_tilde(t))
    }

    pub fn curve_bias_corrected(&self, grid: &[f64]) -> CurveEstimate {
        self.curve(grid, |t| self.g_hat(t))
    }

    fn curve<F: Fn(f64) -> Result<f64>>(&self, grid: &[f64], f: F) -> CurveEstimate {
        let mut values = Vec::with_capacity(grid.len());
        let mut valid = Vec::with_capacity(grid.len());
        for &t in grid {
            match f(t) {
                Ok(v) => {
                    values.push(v);
                    valid.push(true);
                }
                Err(_) => {
                    values.push(f64::NAN);
                    valid.push(false);
                }
            }
        }
        CurveEstimate {
            grid: grid.to_vec(),
            values,
            valid,
        }
    }

    /// Per-subject `(c_i, k_i)` with `R_i(g) = c_i - g k_i`; `None` when the window is empty.
    fn affine_aux(&self, t: f64, c: &mut Vec<f64>, k: &mut Vec<f64>) -> Option<f64> {
        let n = self.frame.n_subjects;
        c.clear();
        c.resize(n, 0.0);
        k.clear();
        k.resize(n, 0.0);
        let mut num = 0.0;
        let mut den = 0.0;
        self.smoother().for_each_in_window(t, |b, w| {
            let s = self.frame.subject[b];
            num += w * self.resid[b];
            den += w;
            c[s] += w * (self.resid[b] - self.g_tilde_obs[b]);
            k[s] += w;
        });
        if den <= 0.0 {
            return None;
        }
        let gt = num / den;
        for (ci, ki) in c.iter_mut().zip(k.iter()) {
            *ci += gt * ki;
        }
        Some(gt)
    }

    /// `R_i{g}` at `t` for every subject.
    pub fn auxiliary_r(&self, g: f64, t: f64) -> Result<Vec<f64>> {
        let mut c = Vec::new();
        let mut k = Vec::new();
        self.affine_aux(t, &mut c, &mut k)
            .ok_or(Error::EmptyWindow { t })?;
        Ok(c.iter().zip(&k).map(|(ci, ki)| ci - g * ki).collect())
    }
}

/// Fitted curves of every treatment.
#[derive(Debug, Clone)]
pub struct TimeEffectFit {
    pub samples: Vec<SampleCurves>,
    pub treatments: Vec<i64>,
}

impl TimeEffectFit {
    pub fn new(study: &Study, cfg: &IntegratedStatConfig) -> Result<Self> {
        let hs = bandwidths(study);
        let frames = study.frames();
        let xis: Vec<Vec<f64>> = if cfg.zero_xi {
            frames.iter().map(|f| vec![0.0; f.dim()]).collect()
        } else {
            contexts(study, cfg.kernel)?
                .iter()
                .map(|c| c.xi_hat())
                .collect::<Result<_>>()?
        };
        let samples = frames
            .into_iter()
            .zip(hs)
            .zip(xis)
            .map(|((f, h), xi)| SampleCurves::new(f, cfg.kernel, h, xi))
            .collect::<Result<Vec<_>>>()?;
        Ok(TimeEffectFit {
            samples,
            treatments: study.samples.iter().map(|s| s.treatment_id).collect(),
        })
    }

    pub fn k(&self) -> usize {
        self.samples.len()
    }
}

/// Pointwise ratio and the common baseline value attaining it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalRatio {
    pub t: f64,
    pub value: f64,
    pub g: f64,
}

/// Moments `R_ji(g) = c_ji - g k_ji` of all treatments at one time point.
struct LocalProblem {
    c: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    g_hat: Vec<f64>,
    lambda: Vec<f64>,
    z: Vec<f64>,
}

impl LocalProblem {
    fn build(fit: &TimeEffectFit, t: f64) -> Result<Self> {
        let mut cs = Vec::with_capacity(fit.k());
        let mut ks = Vec::with_capacity(fit.k());
        let mut g_hat = Vec::with_capacity(fit.k());
        let (mut c, mut k) = (Vec::new(), Vec::new());
        for s in &fit.samples {
            s.affine_aux(t, &mut c, &mut k)
                .ok_or(Error::EmptyWindow { t })?;
            // subjects without kernel mass contribute zero moments and drop out
            let (cc, kk): (Vec<f64>, Vec<f64>) = c
                .iter()
                .zip(&k)
                .filter(|(_, kv)| **kv > 0.0)
                .map(|(a, b)| (*a, *b))
                .unzip();
            g_hat.push(cc.iter().sum::<f64>() / kk.iter().sum::<f64>());
            cs.push(cc);
            ks.push(kk);
        }
        Ok(LocalProblem {
            c: cs,
            k: ks,
            g_hat,
            lambda: vec![0.0; fit.k()],
            z: Vec::new(),
        })
    }

    /// Open interval of `g` keeping zero inside every sample's hull.
    fn feasible(&self) -> (f64, f64) {
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for (c, k) in self.c.iter().zip(&self.k) {
            let (mn, mx) = c
                .iter()
                .zip(k)
                .map(|(a, b)| a / b)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| {
                    (a.min(r), b.max(r))
                });
            lo = lo.max(mn);
            hi = hi.min(mx);
        }
        (lo, hi)
    }

    /// `(Σ_j ℓ_j(g), dΣℓ_j/dg)`.
    fn eval(&mut self, g: f64) -> (f64, f64) {
        let mut total = 0.0;
        let mut deriv = 0.0;
        for j in 0..self.c.len() {
            self.z.clear();
            self.z
                .extend(self.c[j].iter().zip(&self.k[j]).map(|(c, k)| c - g * k));
            let s = solve_scalar_from(&self.z, self.lambda[j]);
            if !s.converged {
                return (f64::INFINITY, f64::NAN);
            }
            let lam = s.lambda[0];
            self.lambda[j] = lam;
            total += s.neg2logratio;
            let mut acc = 0.0;
            for (r, k) in self.z.iter().zip(&self.k[j]) {
                acc += k / (1.0 + lam * r);
            }
            deriv -= 2.0 * lam * acc;
        }
        (total, deriv)
    }
}

const GOLDEN_ITERS: usize = 16;

/// `ℒ(t) = min_g Σ_j -2 log EL_j{g}`.
pub fn local_el_ratio(fit: &TimeEffectFit, t: f64) -> Result<LocalRatio> {
    let mut prob = LocalProblem::build(fit, t)?;
    if fit.k() == 1 {
        return Ok(LocalRatio {
            t,
            value: 0.0,
            g: prob.g_hat[0],
        });
    }
    let (f_lo, f_hi) = prob.feasible();
    if !(f_lo < f_hi) {
        return Err(Error::NoFeasibleG { t });
    }
    let gmin = prob.g_hat.iter().copied().fold(f64::INFINITY, f64::min);
    let gmax = prob.g_hat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = gmax - gmin;
    let width = f_hi - f_lo;
    let pad = 1e-9 * width;
    let mut a = (gmin - 3.0 * spread).max(f_lo + pad);
    let mut b = (gmax + 3.0 * spread).min(f_hi - pad);
    if !(a < b) {
        // the pooled estimates sit at the edge of the feasible set
        a = f_lo + pad;
        b = f_hi - pad;
    }
    if spread <= 1e-14 * (1.0 + gmax.abs()) && gmin > f_lo && gmin < f_hi {
        let (v, _) = prob.eval(gmin);
        if v.is_finite() && v < 1e-12 {
            return Ok(LocalRatio {
                t,
                value: v,
                g: gmin,
            });
        }
    }

    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - phi * (b - a);
    let mut x2 = a + phi * (b - a);
    let mut f1 = prob.eval(x1).0;
    let mut f2 = prob.eval(x2).0;
    for _ in 0..GOLDEN_ITERS {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = prob.eval(x1).0;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = prob.eval(x2).0;
        }
    }
    let (mut best_g, mut best_f) = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
    if !best_f.is_finite() {
        return Err(Error::NoFeasibleG { t });
    }

    // polish: safeguarded secant on the analytic derivative within [a, b]
    let (fa, da) = prob.eval(a);
    let (fb, db) = prob.eval(b);
    for (g, f) in [(a, fa), (b, fb)] {
        if f < best_f {
            best_g = g;
            best_f = f;
        }
    }
    if da.is_finite() && db.is_finite() && da < 0.0 && db > 0.0 {
        let (mut lo, mut hi, mut dlo, mut dhi) = (a, b, da, db);
        for _ in 0..40 {
            let mut g = lo - dlo * (hi - lo) / (dhi - dlo);
            if !(g > lo && g < hi) || !g.is_finite() {
                g = 0.5 * (lo + hi);
            }
            let (f, d) = prob.eval(g);
            if !d.is_finite() {
                break;
            }
            if f < best_f {
                best_f = f;
                best_g = g;
            }
            if d.abs() < 1e-10 || (hi - lo) < 1e-12 * (1.0 + g.abs()) {
                break;
            }
            if d < 0.0 {
                // Illinois modification keeps both ends moving
                lo = g;
                dlo = d;
                dhi *= 0.5;
            } else {
                hi = g;
                dhi = d;
                dlo *= 0.5;
            }
        }
    }
    Ok(LocalRatio {
        t,
        value: best_f.max(0.0),
        g: best_g,
    })
}

/// Pooled-time kernel density of all observed times, on the grid.
fn pooled_time_density(fit: &TimeEffectFit, grid: &[f64]) -> Vec<f64> {
    let h = fit.samples.iter().map(|s| s.h).sum::<f64>() / fit.k() as f64;
    let kernel = fit.samples[0].kernel;
    let times: Vec<f64> = fit
        .samples
        .iter()
        .flat_map(|s| s.frame.time.iter().copied())
        .collect();
    let n = times.len() as f64;
    grid.iter()
        .map(|&t| times.iter().map(|&s| kernel.scaled(s - t, h)).sum::<f64>() / n)
        .collect()
}

fn weight_values(fit: &TimeEffectFit, grid: &[f64], wf: &WeightFn) -> Vec<f64> {
    match wf {
        WeightFn::Uniform => vec![1.0; grid.len()],
        WeightFn::PooledTimeKde => pooled_time_density(fit, grid),
        WeightFn::Table { times, values } => {
            let c = CurveEstimate {
                grid: times.clone(),
                values: values.clone(),
                valid: vec![true; times.len()],
            };
            grid.iter().map(|&t| c.interpolate(t).max(0.0)).collect()
        }
    }
}

/// `𝒯ₙ` and its ingredients on the evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegratedResult {
    pub statistic: f64,
    pub grid: Vec<f64>,
    pub valid: Vec<bool>,
    /// `ℒₙ(t)` (NaN where invalid).
    pub local: Vec<f64>,
    /// Normalized `ϖ` on the grid (zero where invalid).
    pub weights: Vec<f64>,
    /// Trapezoid weights of the masked grid.
    pub quadrature: Vec<f64>,
}

pub fn integrated_statistic(
    fit: &TimeEffectFit,
    cfg: &IntegratedStatConfig,
) -> Result<IntegratedResult> {
    let grid = cfg.grid();
    let mut local = vec![f64::NAN; grid.len()];
    let mut valid = vec![false; grid.len()];
    for (i, &t) in grid.iter().enumerate() {
        match local_el_ratio(fit, t) {
            Ok(r) => {
                local[i] = r.value;
                valid[i] = true;
            }
            Err(Error::EmptyWindow { .. }) if cfg.restrict_to_valid => {}
            Err(e) => return Err(e),
        }
    }
    let quad = masked_trapezoid_weights(&grid, &valid);
    let raw = weight_values(fit, &grid, &cfg.weight_fn);
    let mass: f64 = quad.iter().zip(&raw).map(|(q, w)| q * w).sum();
    if !(mass > 0.0) {
        return Err(Error::NoFeasibleG {
            t: grid[grid.len() / 2],
        });
    }
    let weights: Vec<f64> = raw
        .iter()
        .zip(&valid)
        .map(|(w, v)| if *v { w / mass } else { 0.0 })
        .collect();
    let statistic = quad
        .iter()
        .zip(&weights)
        .zip(&local)
        .filter(|((q, _), _)| **q > 0.0)
        .map(|((q, w), l)| q * w * l)
        .sum();
    Ok(IntegratedResult {
        statistic,
        grid,
        valid,
        local,
        weights,
        quadrature: quad,
    })
}

/// Plug-in variance constant of the integrated statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sigma0Estimate {
    pub sigma0_sq: f64,
    /// Reference bandwidth `h` with `b_j h_j = h` (the first treatment's).
    pub h_ref: f64,
    pub sigma_eps_sq: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// `f̂_j` on the grid, one row per treatment.
    pub density: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub k2_zero: f64,
    pub k4_zero: f64,
}

pub fn estimate_sigma0(fit: &TimeEffectFit, integ: &IntegratedResult) -> Result<Sigma0Estimate> {
    let k = fit.k();
    let kernel = fit.samples[0].kernel;
    let k2 = kernel.k2_zero();
    let k4 = kernel.k4_zero(1.0);
    let h_ref = fit.samples[0].h;
    let b: Vec<f64> = fit.samples.iter().map(|s| h_ref / s.h).collect();
    let mut sig = Vec::with_capacity(k);
    let mut a = Vec::with_capacity(k);
    let mut dens = Vec::with_capacity(k);
    for (j, s) in fit.samples.iter().enumerate() {
        let n = s.frame.n_subjects as f64;
        let t_len = s.frame.visit.iter().max().map(|m| m + 1).unwrap_or(1) as f64;
        let ss: f64 = (0..s.frame.len())
            .map(|b| s.frame.ipw[b] * (s.resid[b] - s.g_tilde_obs[b]).powi(2))
            .sum();
        sig.push((ss / (n * t_len)).max(1e-12));
        a.push(1.0 / (n * t_len));
        let total: f64 = s.frame.ipw.iter().sum();
        let sm = Smoother::new(&s.frame, s.kernel, s.h);
        let f: Vec<f64> = integ
            .grid
            .iter()
            .map(|&t| sm.mass(t) / (s.h * total))
            .collect();
        let degenerate = integ
            .grid
            .iter()
            .enumerate()
            .filter(|(i, _)| integ.quadrature[*i] > 0.0 && f[*i] <= 1e-12)
            .count();
        if degenerate > 0 {
            return Err(Error::DegenerateDensity(j));
        }
        dens.push(f);
    }
    let c_pairs: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            (0..k)
                .map(|l| {
                    if j == l || (b[j] / b[l] - 1.0).abs() < 1e-12 {
                        k4
                    } else {
                        kernel.k4_zero(b[j] / b[l])
                    }
                })
                .collect()
        })
        .collect();
    let g = integ.grid.len();
    let mut w = vec![vec![0.0; g]; k];
    let mut v = vec![vec![0.0; g]; k];
    let mut lambda = vec![0.0; g];
    for i in 0..g {
        let raw: Vec<f64> = (0..k)
            .map(|j| dens[j][i] / (a[j] * b[j] * sig[j]))
            .collect();
        let tot: f64 = raw.iter().sum();
        for j in 0..k {
            w[j][i] = if tot > 0.0 {
                raw[j] / tot
            } else {
                1.0 / k as f64
            };
            v[j][i] = k2 * sig[j] * dens[j][i];
        }
        let mut lam = 0.0;
        for j in 0..k {
            lam += k4 / b[j] * (1.0 - w[j][i]).powi(2);
            for l in 0..k {
                if l != j {
                    lam += c_pairs[j][l] / (b[j] * b[l]).sqrt() * w[j][i] * w[l][i];
                }
            }
        }
        lambda[i] = lam;
    }
    let integral: f64 = (0..g)
        .map(|i| integ.quadrature[i] * lambda[i] * integ.weights[i].powi(2))
        .sum();
    Ok(Sigma0Estimate {
        sigma0_sq: 2.0 * integral / (k2 * k2),
        h_ref,
        sigma_eps_sq: sig,
        a,
        b,
        density: dens,
        w,
        v,
        lambda,
        k2_zero: k2,
        k4_zero: k4,
    })
}

/// Normal calibration: reject when `𝒯ₙ ≥ h^{1/2} σ̂₀ z_α + (k - 1)`.
pub fn asymptotic_g_test(study: &Study, cfg: &IntegratedStatConfig) -> Result<TestReport> {
    let fit = TimeEffectFit::new(study, cfg)?;
    let integ = match integrated_statistic(&fit, cfg) {
        Err(Error::NoFeasibleG { t }) => return Ok(infeasible_report("g_asymptotic", study, t)),
        r => r?,
    };
    let s0 = estimate_sigma0(&fit, &integ)?;
    let scale = s0.h_ref.sqrt() * s0.sigma0_sq.sqrt();
    let center = (fit.k() - 1) as f64;
    let mut r = TestReport::normal("g_asymptotic", integ.statistic, center, scale, false);
    let mut meta = study_meta(study);
    meta.extra
        .insert("sigma0_sq".into(), serde_json::json!(s0.sigma0_sq));
    meta.extra.insert(
        "critical_value_0.05".into(),
        serde_json::json!(scale * normal_quantile(0.95) + center),
    );
    r.meta = meta;
    Ok(r)
}

/// Report for data where some grid point admits no common baseline: the EL ratio is
/// infinite there, so the statistic is `+∞` and the null is rejected at every level.
pub fn infeasible_report(test: &str, study: &Study, t: f64) -> TestReport {
    let center = study.k().saturating_sub(1) as f64;
    let mut r = TestReport::normal(test, f64::INFINITY, center, 1.0, false);
    let mut meta = study_meta(study);
    meta.extra
        .insert("infeasible_at".into(), serde_json::json!(t));
    r.meta = meta;
    r
}

/// Linear weights `A_b` with `∫_a^{1-a} ĝ(t) dt = Σ_b A_b Y_b` (for `ξ̂ = 0`).
fn integral_weights(s: &SampleCurves, grid: &[f64], quad: &[f64]) -> Result<Vec<f64>> {
    let n = s.frame.len();
    let sm = s.smoother();
    // w_c(t_b') for every observation, cached per observation
    let obs_weights: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|c| {
            let t = s.frame.time[c];
            let mut v = Vec::new();
            let mut den = 0.0;
            sm.for_each_in_window(t, |b, w| {
                v.push((b, w));
                den += w;
            });
            v.iter_mut().for_each(|x| x.1 /= den);
            v
        })
        .collect();
    let mut a = vec![0.0; n];
    for (&t, &q) in grid.iter().zip(quad) {
        if q == 0.0 {
            continue;
        }
        let mut wt = Vec::new();
        let mut den = 0.0;
        sm.for_each_in_window(t, |b, w| {
            wt.push((b, w));
            den += w;
        });
        if den <= 0.0 {
            return Err(Error::EmptyWindow { t });
        }
        for &(c, w) in &wt {
            let wc = w / den;
            a[c] += q * 2.0 * wc;
            for &(b, wb) in &obs_weights[c] {
                a[b] -= q * wc * wb;
            }
        }
    }
    Ok(a)
}

/// Cumulative-difference comparator for two complete-data samples:
/// `T = ∫_a^{1-a} (ĝ₁ - ĝ₂) dt` over a subject-level sandwich standard error.
pub fn scheike_zhang_test(study: &Study, a: f64, cfg: &IntegratedStatConfig) -> Result<TestReport> {
    if study.k() != 2 {
        return Err(Error::InvalidInput(
            "the comparator needs exactly two treatments".into(),
        ));
    }
    let mut zcfg = cfg.clone();
    zcfg.zero_xi = true;
    let fit = TimeEffectFit::new(study, &zcfg)?;
    let grid: Vec<f64> = cfg
        .grid()
        .into_iter()
        .filter(|&t| t >= a - 1e-12 && t <= 1.0 - a + 1e-12)
        .collect();
    let valid: Vec<bool> = grid
        .iter()
        .map(|&t| fit.samples.iter().all(|s| s.smoother().mass(t) > 0.0))
        .collect();
    let quad = masked_trapezoid_weights(&grid, &valid);
    let mut stat = 0.0;
    let mut var = 0.0;
    for (j, s) in fit.samples.iter().enumerate() {
        let aw = integral_weights(s, &grid, &quad)?;
        let sign = if j == 0 { 1.0 } else { -1.0 };
        stat += sign * aw.iter().zip(&s.frame.y).map(|(w, y)| w * y).sum::<f64>();
        let ghat_obs: Vec<f64> = s
            .frame
            .time
            .iter()
            .map(|&t| s.g_hat(t))
            .collect::<Result<_>>()?;
        for i in 0..s.frame.n_subjects {
            let u: f64 = s
                .frame
                .subject_rows(i)
                .map(|b| aw[b] * (s.frame.y[b] - ghat_obs[b]))
                .sum();
            var += u * u;
        }
    }
    if !(var > 0.0) {
        return Err(Error::DegenerateDensity(0));
    }
    let mut r = TestReport::normal("scheike_zhang", stat / var.sqrt(), 0.0, 1.0, true);
    let mut meta = study_meta(study);
    meta.extra
        .insert("integral".into(), serde_json::json!(stat));
    meta.extra
        .insert("std_error".into(), serde_json::json!(var.sqrt()));
    r.meta = meta;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Frame with one covariate-free visit per row; rows grouped by `subjects`.
    fn frame(subjects: &[usize], times: &[f64], y: &[f64]) -> SampleFrame {
        let n = times.len();
        SampleFrame::from_columns(
            subjects.to_vec(),
            (0..n).collect(),
            times.to_vec(),
            vec![1.0; n],
            vec![],
            0,
            vec![],
            0,
            y.to_vec(),
        )
    }

    fn fit_of(frames: Vec<(SampleFrame, f64)>) -> TimeEffectFit {
        let k = frames.len();
        TimeEffectFit {
            samples: frames
                .into_iter()
                .map(|(f, h)| SampleCurves::new(f, Kernel::Epanechnikov, h, vec![]).unwrap())
                .collect(),
            treatments: (1..=k as i64).collect(),
        }
    }

    #[test]
    fn constant_curve_has_no_correction() {
        let t: Vec<f64> = (0..30).map(|i| i as f64 / 29.0).collect();
        let s: Vec<usize> = (0..30).map(|i| i / 3).collect();
        let c = SampleCurves::new(frame(&s, &t, &[1.7; 30]), Kernel::Epanechnikov, 0.2, vec![])
            .unwrap();
        for x in [0.1, 0.5, 0.93] {
            assert!((c.g_tilde(x).unwrap() - 1.7).abs() < 1e-14);
            assert!((c.g_hat(x).unwrap() - 1.7).abs() < 1e-14);
        }
    }

    #[test]
    fn g_hat_is_root_of_auxiliary_sum() {
        let t: Vec<f64> = (0..40).map(|i| (i as f64 + 0.3) / 40.0).collect();
        let s: Vec<usize> = (0..40).map(|i| i / 4).collect();
        let y: Vec<f64> = t.iter().map(|x| (6.0 * x).sin() + 0.1 * x).collect();
        let c = SampleCurves::new(frame(&s, &t, &y), Kernel::Epanechnikov, 0.15, vec![]).unwrap();
        let g = c.g_hat(0.4).unwrap();
        let r = c.auxiliary_r(g, 0.4).unwrap();
        assert!(r.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn auxiliary_matches_hand_evaluation() {
        // subjects {0: t=0.4, 0.5}, {1: t=0.6}; h = 0.5, evaluate at t = 0.5
        let f = frame(&[0, 0, 1], &[0.4, 0.5, 0.6], &[1.0, 2.0, 4.0]);
        let h = 0.5;
        let c = SampleCurves::new(f, Kernel::Epanechnikov, h, vec![]).unwrap();
        let k = |u: f64| 0.75 * (1.0 - (u / h).powi(2));
        let times = [0.4, 0.5, 0.6];
        let y = [1.0, 2.0, 4.0];
        let gt = |s: f64| {
            let w: Vec<f64> = times.iter().map(|t| k(t - s)).collect();
            w.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / w.iter().sum::<f64>()
        };
        let g = 1.3;
        let term = |b: usize| k(times[b] - 0.5) * (y[b] - g - (gt(times[b]) - gt(0.5)));
        let expect = [term(0) + term(1), term(2)];
        let got = c.auxiliary_r(g, 0.5).unwrap();
        for (a, b) in got.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{got:?} vs {expect:?}");
        }
    }

    #[test]
    fn copied_samples_have_zero_ratio() {
        let t: Vec<f64> = (0..40).map(|i| (i as f64 + 0.5) / 40.0).collect();
        let s: Vec<usize> = (0..40).map(|i| i / 4).collect();
        let y: Vec<f64> = t
            .iter()
            .enumerate()
            .map(|(i, x)| x + 0.3 * ((i * 7 % 5) as f64 - 2.0))
            .collect();
        let fit = fit_of(vec![(frame(&s, &t, &y), 0.2), (frame(&s, &t, &y), 0.2)]);
        let r = local_el_ratio(&fit, 0.5).unwrap();
        assert!(r.value < 1e-10, "{}", r.value);
        let cfg = IntegratedStatConfig {
            weight_fn: WeightFn::Uniform,
            ..Default::default()
        };
        assert!(integrated_statistic(&fit, &cfg).unwrap().statistic < 1e-9);
    }

    fn two_noisy_samples(shift: f64) -> TimeEffectFit {
        let t: Vec<f64> = (0..60).map(|i| ((i * 37) % 60) as f64 / 59.0).collect();
        let s: Vec<usize> = (0..60).map(|i| i / 3).collect();
        let noise = |i: usize| ((i * 7919 % 101) as f64 / 101.0 - 0.5) * 0.8;
        let y1: Vec<f64> = t
            .iter()
            .enumerate()
            .map(|(i, x)| (5.0 * x).sin() + noise(i))
            .collect();
        let y2: Vec<f64> = t
            .iter()
            .enumerate()
            .map(|(i, x)| (5.0 * x).sin() + shift + noise(i + 13))
            .collect();
        fit_of(vec![(frame(&s, &t, &y1), 0.2), (frame(&s, &t, &y2), 0.25)])
    }

    #[test]
    fn local_ratio_matches_grid_search() {
        let fit = two_noisy_samples(0.3);
        for t in [0.2, 0.5, 0.8] {
            let r = local_el_ratio(&fit, t).unwrap();
            // brute force over the feasible interval with fresh solves
            let prob = LocalProblem::build(&fit, t).unwrap();
            let (lo, hi) = prob.feasible();
            let n = 20000;
            let mut best = f64::INFINITY;
            for i in 1..n {
                let g = lo + (hi - lo) * i as f64 / n as f64;
                let v: f64 = fit
                    .samples
                    .iter()
                    .map(|s| crate::el::neg2_log_el(&s.auxiliary_r(g, t).unwrap(), 1))
                    .sum();
                best = best.min(v);
            }
            assert!(r.value <= best + 1e-9, "t={t}: {} vs grid {best}", r.value);
            assert!(best - r.value < 1e-4, "t={t}: {} vs grid {best}", r.value);
        }
    }

    #[test]
    fn sigma0_equal_bandwidths_reduces_to_kernel_constant() {
        // with common bandwidths the weights cancel: Λ = K4 (k - 1)
        let t: Vec<f64> = (0..60).map(|i| ((i * 37) % 60) as f64 / 59.0).collect();
        let s: Vec<usize> = (0..60).map(|i| i / 3).collect();
        let y: Vec<f64> = t.iter().map(|x| x * x).collect();
        let fit = fit_of(vec![(frame(&s, &t, &y), 0.3), (frame(&s, &t, &y), 0.3)]);
        let cfg = IntegratedStatConfig {
            weight_fn: WeightFn::Uniform,
            ..Default::default()
        };
        let integ = integrated_statistic(&fit, &cfg).unwrap();
        let s0 = estimate_sigma0(&fit, &integ).unwrap();
        let expect = 2.0 * (167.0 / 385.0) / 0.36;
        assert!(
            (s0.sigma0_sq - expect).abs() < 1e-8,
            "{} vs {expect}",
            s0.sigma0_sq
        );
    }

    #[test]
    fn shifted_curves_give_larger_statistic() {
        let cfg = IntegratedStatConfig {
            weight_fn: WeightFn::Uniform,
            ..Default::default()
        };
        let a = integrated_statistic(&two_noisy_samples(0.0), &cfg)
            .unwrap()
            .statistic;
        let b = integrated_statistic(&two_noisy_samples(0.3), &cfg)
            .unwrap()
            .statistic;
        assert!(b > 5.0 * a.max(0.1), "{a} vs {b}");
        // disjoint supports of the residuals: no common baseline anywhere
        assert!(matches!(
            integrated_statistic(&two_noisy_samples(5.0), &cfg),
            Err(Error::NoFeasibleG { .. })
        ));
    }

    #[test]
    fn profile_is_below_ratio_at_first_curve() {
        let fit = two_noisy_samples(0.2);
        for t in [0.3, 0.6] {
            let r = local_el_ratio(&fit, t).unwrap();
            let g1 = fit.samples[0].g_hat(t).unwrap();
            let probe: f64 = fit
                .samples
                .iter()
                .map(|s| crate::el::neg2_log_el(&s.auxiliary_r(g1, t).unwrap(), 1))
                .sum();
            assert!(r.value <= probe + 1e-12);
            assert!(r.value >= 0.0);
        }
    }

    #[test]
    fn statistic_ignores_weight_scale() {
        let fit = two_noisy_samples(0.2);
        let grid: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
        let table = |c: f64| IntegratedStatConfig {
            weight_fn: WeightFn::Table {
                times: grid.clone(),
                values: grid.iter().map(|t| c * (1.0 + t)).collect(),
            },
            ..Default::default()
        };
        let a = integrated_statistic(&fit, &table(1.0)).unwrap().statistic;
        let b = integrated_statistic(&fit, &table(37.0)).unwrap().statistic;
        assert!((a - b).abs() < 1e-10 * a.max(1.0));
    }

    fn dense(g: impl Fn(f64) -> f64) -> SampleFrame {
        let n = 2000;
        let t: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let s: Vec<usize> = (0..n).map(|i| i / 5).collect();
        let y: Vec<f64> = t.iter().map(|&x| g(x)).collect();
        frame(&s, &t, &y)
    }

    fn interior_error(c: &SampleCurves, g: impl Fn(f64) -> f64, corrected: bool) -> f64 {
        (20..=80)
            .map(|i| {
                let t = i as f64 / 100.0;
                let v = if corrected { c.g_hat(t) } else { c.g_tilde(t) }.unwrap();
                (v - g(t)).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn smoother_bias_on_noiseless_sine() {
        let g = |t: f64| 2.0 * (2.0 * std::f64::consts::PI * t).sin();
        let c = SampleCurves::new(dense(g), Kernel::Epanechnikov, 0.05, vec![]).unwrap();
        assert!(interior_error(&c, g, false) < 0.15);
        assert!(interior_error(&c, g, true) < 0.15);
    }

    #[test]
    fn correction_reduces_bias() {
        let lin = |t: f64| 1.0 + 2.0 * t;
        let c = SampleCurves::new(dense(lin), Kernel::Epanechnikov, 0.1, vec![]).unwrap();
        let (plug, corr) = (
            interior_error(&c, lin, false),
            interior_error(&c, lin, true),
        );
        assert!(plug < 1e-3 && corr < 1e-3, "{plug} {corr}");
        assert!(corr <= plug + 1e-12);
        let quad = |t: f64| 3.0 * t * t;
        let c = SampleCurves::new(dense(quad), Kernel::Epanechnikov, 0.1, vec![]).unwrap();
        assert!(interior_error(&c, quad, true) < interior_error(&c, quad, false));
    }

    #[test]
    fn single_visit_curve_is_the_residual() {
        let c = SampleCurves::new(
            frame(&[0], &[0.5], &[2.5]),
            Kernel::Epanechnikov,
            0.2,
            vec![],
        )
        .unwrap();
        let curve = c.curve_plugin(&[0.0, 0.4, 0.5, 0.65, 1.0]);
        assert_eq!(curve.valid, vec![false, true, true, true, false]);
        assert!((curve.values[1] - 2.5).abs() < 1e-15 && (curve.values[3] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn k_one_ratio_is_zero() {
        let fit = fit_of(vec![(dense(|t| t), 0.1)]);
        let r = local_el_ratio(&fit, 0.5).unwrap();
        assert_eq!(r.value, 0.0);
        assert!((r.g - fit.samples[0].g_hat(0.5).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn comparator_weights_integrate_g_hat() {
        let f = dense(|t| (3.0 * t).cos());
        let c = SampleCurves::new(f, Kernel::Epanechnikov, 0.1, vec![]).unwrap();
        let grid: Vec<f64> = (0..51).map(|i| i as f64 / 50.0).collect();
        let quad = masked_trapezoid_weights(&grid, &vec![true; grid.len()]);
        let a = integral_weights(&c, &grid, &quad).unwrap();
        let lin: f64 = a.iter().zip(&c.frame.y).map(|(w, y)| w * y).sum();
        let direct: f64 = grid
            .iter()
            .zip(&quad)
            .map(|(t, q)| q * c.g_hat(*t).unwrap())
            .sum();
        assert!((lin - direct).abs() < 1e-10, "{lin} vs {direct}");
    }

    #[test]
    fn interpolation_uses_valid_points() {
        let c = CurveEstimate {
            grid: vec![0.0, 0.5, 1.0],
            values: vec![f64::NAN, 1.0, 3.0],
            valid: vec![false, true, true],
        };
        assert_eq!(c.interpolate(0.1), 1.0);
        assert_eq!(c.interpolate(0.75), 2.0);
        assert_eq!(c.interpolate(1.0), 3.0);
    }
}
