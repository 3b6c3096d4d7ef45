//! Simulation designs, missingness mechanisms and the Monte Carlo driver.

use std::f64::consts::PI;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandwidth::{cv_bandwidth, default_grid};
use crate::bootstrap::{bootstrap_timeeffect_test, BootstrapConfig, WildDist, MAX_FAILURE_RATE};
use crate::covariate::{
    anova_beta_test, anova_gamma_test, interaction_presence_test, CovariateConfig,
};
use crate::data::{InteractionRule, ObservationRecord, Study, SubjectTrajectory, TreatmentSample};
use crate::error::{Error, Result};
use crate::kernel::Kernel;
use crate::propensity::{attach_propensity, FeatureRule, History, PropensitySpec};
use crate::report::TestReport;
use crate::rng::{derive_seed, stage, stream};
use crate::time_effect::{asymptotic_g_test, scheike_zhang_test, IntegratedStatConfig, WeightFn};

/// Departure `Δ_j(t)` of a treatment's baseline from `2 sin(2πt)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shift {
    Zero,
    /// `u sin(2πt)`.
    Amplitude {
        u: f64,
    },
    /// `2 sin(2πt) - 2 sin(2π(t + v))`.
    Phase {
        v: f64,
    },
    Constant {
        c: f64,
    },
}

impl Shift {
    pub fn eval(self, t: f64) -> f64 {
        match self {
            Shift::Zero => 0.0,
            Shift::Amplitude { u } => u * (2.0 * PI * t).sin(),
            Shift::Phase { v } => 2.0 * (2.0 * PI * t).sin() - 2.0 * (2.0 * PI * (t + v)).sin(),
            Shift::Constant { c } => c,
        }
    }
}

/// Dropout mechanism; visit `m > 0` is only possible when visit `m - 1` was observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mechanism {
    None,
    /// `logit p_m = θ_j X_{m-1}`.
    CovariateOnly {
        theta: Vec<f64>,
    },
    /// `logit p_m = θ_{j1} X_{m-1} + θ_{j2}(Y_{m-1} - Y_{m-2})`, the difference term
    /// dropped at the second visit.
    CovariateResponse {
        theta: Vec<[f64; 2]>,
    },
}

impl Mechanism {
    pub fn dropout_i() -> Self {
        Mechanism::CovariateOnly {
            theta: vec![3.0, 2.0, 2.0],
        }
    }

    pub fn dropout_ii() -> Self {
        Mechanism::CovariateResponse {
            theta: vec![[2.0, -1.0], [2.0, -1.5], [2.0, -1.5]],
        }
    }

    /// Working model family matching the mechanism, as fitted by the analysis.
    pub fn spec(&self) -> Option<PropensitySpec> {
        match self {
            Mechanism::None => None,
            Mechanism::CovariateOnly { .. } => {
                Some(PropensitySpec::new(FeatureRule::LagCovariate {
                    covariate: 0,
                    intercept: false,
                }))
            }
            Mechanism::CovariateResponse { .. } => {
                Some(PropensitySpec::new(FeatureRule::LagCovariateResponseDiff {
                    covariate: 0,
                    intercept: false,
                }))
            }
        }
    }

    fn theta(&self, j: usize) -> Option<Vec<f64>> {
        match self {
            Mechanism::None => None,
            Mechanism::CovariateOnly { theta } => Some(vec![theta[j]]),
            Mechanism::CovariateResponse { theta } => Some(theta[j].to_vec()),
        }
    }

    fn arms(&self) -> Option<usize> {
        match self {
            Mechanism::None => None,
            Mechanism::CovariateOnly { theta } => Some(theta.len()),
            Mechanism::CovariateResponse { theta } => Some(theta.len()),
        }
    }
}

/// One treatment of a design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub n: usize,
    pub beta: f64,
    pub gamma: f64,
    pub shift: Shift,
    /// `(σ_a, σ_b, σ_c)`: covariate noise, subject effect, visit noise.
    pub noise: (f64, f64, f64),
}

/// `Y = Xβ + Mγ + 2 sin(2πt) - Δ(t) + e + ν` with `X = 2 - 1.5t + u` and
/// `M = t(X - 1.5)²`, at `T` sorted uniform times per subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub arms: Vec<Arm>,
    pub t_len: usize,
    pub mechanism: Mechanism,
    /// When false, only the baseline and the errors enter the response and `p = 0`.
    pub covariates: bool,
    pub seed: u64,
}

pub const NOISE_12: (f64, f64, f64) = (0.5, 0.5, 0.2);
pub const NOISE_3: (f64, f64, f64) = (0.6, 0.6, 0.3);
pub const SMALL_N: [usize; 3] = [60, 65, 55];
pub const LARGE_N: [usize; 3] = [100, 110, 105];

impl SimDesign {
    /// Three-arm design with offsets `D₂, D₃` on both `β` and `γ`.
    pub fn three_arm(n: [usize; 3], t_len: usize, mechanism: Mechanism, d2: f64, d3: f64) -> Self {
        let noise = [NOISE_12, NOISE_12, NOISE_3];
        let off = [0.0, d2, d3];
        SimDesign {
            arms: (0..3)
                .map(|j| Arm {
                    n: n[j],
                    beta: 2.0 + off[j],
                    gamma: 1.0 + off[j],
                    shift: Shift::Zero,
                    noise: noise[j],
                })
                .collect(),
            t_len,
            mechanism,
            covariates: true,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn k(&self) -> usize {
        self.arms.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.arms.len() < 1 || self.t_len < 2 {
            return Err(Error::InvalidInput(
                "design needs an arm and at least two visits".into(),
            ));
        }
        if let Some(k) = self.mechanism.arms() {
            if k != self.arms.len() {
                return Err(Error::InvalidInput(format!(
                    "mechanism has {k} parameter sets for {} arms",
                    self.arms.len()
                )));
            }
        }
        for a in &self.arms {
            let (sa, sb, sc) = a.noise;
            if a.n < 2 || sa < 0.0 || sb < 0.0 || sc < 0.0 {
                return Err(Error::InvalidInput(
                    "arms need n ≥ 2 and nonnegative scales".into(),
                ));
            }
        }
        Ok(())
    }
}

pub fn baseline(t: f64) -> f64 {
    2.0 * (2.0 * PI * t).sin()
}

fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd).expect("finite scale")
}

/// Complete data of replicate `replicate`, deterministic in `(design.seed, replicate)`.
pub fn generate_dataset(design: &SimDesign, replicate: u64) -> Result<Study> {
    design.validate()?;
    let mut rng = stream(design.seed, replicate, stage::DESIGN);
    let mut samples = Vec::with_capacity(design.k());
    for (j, arm) in design.arms.iter().enumerate() {
        let (sa, sb, sc) = arm.noise;
        let mut subjects = Vec::with_capacity(arm.n);
        for i in 0..arm.n {
            let mut times: Vec<f64> = (0..design.t_len).map(|_| rng.random::<f64>()).collect();
            times.sort_by(f64::total_cmp);
            let e = normal(sb).sample(&mut rng);
            let records = times
                .iter()
                .map(|&t| {
                    let u = normal(sa).sample(&mut rng);
                    let nu = normal(sc).sample(&mut rng);
                    let x = 2.0 - 1.5 * t + u;
                    let m = t * (x - 1.5).powi(2);
                    let g = baseline(t) - arm.shift.eval(t);
                    let (covariates, y) = if design.covariates {
                        (vec![x], x * arm.beta + m * arm.gamma + g + e + nu)
                    } else {
                        (vec![], g + e + nu)
                    };
                    ObservationRecord {
                        treatment_id: j as i64 + 1,
                        subject_id: i as i64 + 1,
                        time: t,
                        covariates: Some(covariates),
                        response: Some(y),
                        observed: true,
                    }
                })
                .collect();
            subjects.push(SubjectTrajectory::new(i as i64 + 1, records, 1));
        }
        samples.push(TreatmentSample {
            treatment_id: j as i64 + 1,
            subjects,
            schedule_length: design.t_len,
            bandwidth: None,
            propensity: None,
        });
    }
    let (p, rule) = if design.covariates {
        (
            1,
            InteractionRule::ShiftedSquareTime {
                covariate: 0,
                shift: 1.5,
            },
        )
    } else {
        (0, InteractionRule::None)
    };
    Study::new(samples, p, rule, 1)
}

/// Sequential dropout under `mechanism`; the first visit is always kept.
pub fn apply_missingness(study: &Study, mechanism: &Mechanism, seed: u64, replicate: u64) -> Study {
    let Some(spec) = mechanism.spec() else {
        return study.clone();
    };
    let mut rng = stream(seed, replicate, stage::MISSINGNESS);
    let mut out = study.clone();
    for (j, sample) in out.samples.iter_mut().enumerate() {
        let theta = mechanism.theta(j).expect("mechanism covers every arm");
        for subj in &mut sample.subjects {
            let mut recs = subj.records.clone();
            for m in 1..recs.len() {
                let keep = recs[m - 1].observed && {
                    let p = spec.probability(&History::new(&recs, m), &theta);
                    rng.random::<f64>() < p
                };
                if !keep {
                    recs[m].observed = false;
                    recs[m].response = None;
                    recs[m].covariates = None;
                }
            }
            *subj = SubjectTrajectory::new(subj.subject_id, recs, study.lag_d);
        }
    }
    out
}

/// Observed data of one replicate with the working propensity fitted.
pub fn replicate_study(design: &SimDesign, replicate: u64) -> Result<Study> {
    let complete = generate_dataset(design, replicate)?;
    let mut study = apply_missingness(&complete, &design.mechanism, design.seed, replicate);
    if let Some(spec) = design.mechanism.spec() {
        attach_propensity(&mut study, &vec![spec; design.k()])?;
    }
    Ok(study)
}

/// Cross-validated bandwidths on the given replicate, for freezing across a study.
pub fn select_bandwidths(design: &SimDesign, replicate: u64, kernel: Kernel) -> Result<Vec<f64>> {
    let study = replicate_study(design, replicate)?;
    study
        .frames()
        .iter()
        .map(|f| Ok(cv_bandwidth(f, kernel, &default_grid(f))?.h_star))
        .collect()
}

/// Which test a Monte Carlo study runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestSelector {
    Beta,
    Gamma,
    /// Absence of the interaction in the arm at this position.
    Interaction {
        treatment: usize,
    },
    TimeEffectBootstrap {
        reps: usize,
        wild: WildDist,
    },
    TimeEffectAsymptotic,
    ScheikeZhang {
        a: f64,
    },
}

impl TestSelector {
    pub fn name(&self) -> &'static str {
        match self {
            TestSelector::Beta => "beta",
            TestSelector::Gamma => "gamma",
            TestSelector::Interaction { .. } => "interaction",
            TestSelector::TimeEffectBootstrap { .. } => "g_bootstrap",
            TestSelector::TimeEffectAsymptotic => "g_asymptotic",
            TestSelector::ScheikeZhang { .. } => "scheike_zhang",
        }
    }

    /// Runs the test on `study`; `seed` keys any internal resampling.
    pub fn run(&self, study: &Study, level: f64, seed: u64) -> Result<TestReport> {
        let cov = CovariateConfig {
            levels: vec![level],
            ..Default::default()
        };
        let stat = IntegratedStatConfig {
            weight_fn: WeightFn::PooledTimeKde,
            zero_xi: study.p == 0,
            ..Default::default()
        };
        let mut r = match self {
            TestSelector::Beta => anova_beta_test(study, &cov)?,
            TestSelector::Gamma => anova_gamma_test(study, &cov)?,
            TestSelector::Interaction { treatment } => {
                interaction_presence_test(study, *treatment, &cov)?
            }
            TestSelector::TimeEffectBootstrap { reps, wild } => {
                let cfg = BootstrapConfig {
                    reps: *reps,
                    wild: *wild,
                    seed,
                    level,
                    ..Default::default()
                };
                bootstrap_timeeffect_test(study, &cfg, &stat)?
            }
            TestSelector::TimeEffectAsymptotic => asymptotic_g_test(study, &stat)?,
            TestSelector::ScheikeZhang { a } => scheike_zhang_test(study, *a, &stat)?,
        };
        r.set_levels(&[level]);
        Ok(r)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MCResult {
    pub design: SimDesign,
    pub test: String,
    pub reps: usize,
    pub rejections: usize,
    pub rate: f64,
    pub failures: usize,
    pub wall_time: f64,
    pub level: f64,
    pub bandwidths: Vec<f64>,
    /// Average fraction of missing visits per arm.
    pub missing_rates: Vec<f64>,
    /// Statistic of each successful replicate, in replicate order.
    pub statistics: Vec<f64>,
    pub p_values: Vec<f64>,
}

impl MCResult {
    /// Binomial standard error of the rate.
    pub fn std_error(&self) -> f64 {
        let n = (self.reps - self.failures).max(1) as f64;
        (self.rate * (1.0 - self.rate) / n).sqrt()
    }
}

/// Options of a Monte Carlo run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonteCarlo {
    pub reps: usize,
    pub level: f64,
    /// Frozen bandwidths; selected by cross-validation on replicate 0 when absent.
    pub bandwidths: Option<Vec<f64>>,
    pub kernel: Kernel,
}

impl MonteCarlo {
    pub fn new(reps: usize, level: f64) -> Self {
        MonteCarlo {
            reps,
            level,
            bandwidths: None,
            kernel: Kernel::Epanechnikov,
        }
    }
}

struct Outcome {
    statistic: f64,
    p_value: f64,
    reject: bool,
}

pub fn monte_carlo(design: &SimDesign, test: &TestSelector, mc: &MonteCarlo) -> Result<MCResult> {
    if mc.reps == 0 {
        return Err(Error::InvalidInput("need at least one replicate".into()));
    }
    let start = Instant::now();
    let hs = match &mc.bandwidths {
        Some(h) => h.clone(),
        None => select_bandwidths(design, 0, mc.kernel)?,
    };
    let runs: Vec<(Vec<f64>, Result<Outcome>)> = (0..mc.reps as u64)
        .into_par_iter()
        .map(|r| {
            let mut study = match replicate_study(design, r) {
                Ok(s) => s,
                Err(e) => return (Vec::new(), Err(e)),
            };
            let rates = study.samples.iter().map(|s| s.missing_rate()).collect();
            for (s, h) in study.samples.iter_mut().zip(&hs) {
                s.bandwidth = Some(*h);
            }
            let seed = derive_seed(design.seed, r, stage::BOOTSTRAP);
            let out = test.run(&study, mc.level, seed).map(|rep| Outcome {
                statistic: rep.statistic,
                p_value: rep.p_value,
                reject: rep.rejects(mc.level),
            });
            (rates, out)
        })
        .collect();
    let mut rejections = 0;
    let mut failures = 0;
    let mut statistics = Vec::with_capacity(mc.reps);
    let mut p_values = Vec::with_capacity(mc.reps);
    let mut rate_sum = vec![0.0; design.k()];
    let mut rate_count = 0usize;
    for (rates, out) in runs {
        if rates.len() == design.k() {
            rate_sum.iter_mut().zip(&rates).for_each(|(s, r)| *s += r);
            rate_count += 1;
        }
        match out {
            Ok(o) => {
                rejections += o.reject as usize;
                statistics.push(o.statistic);
                p_values.push(o.p_value);
            }
            Err(e) => {
                log::debug!("replicate failed: {e}");
                failures += 1;
            }
        }
    }
    if failures as f64 > MAX_FAILURE_RATE * mc.reps as f64 {
        return Err(Error::TooManyFailures {
            failures,
            reps: mc.reps,
        });
    }
    let done = mc.reps - failures;
    Ok(MCResult {
        design: design.clone(),
        test: test.name().into(),
        reps: mc.reps,
        rejections,
        rate: rejections as f64 / done.max(1) as f64,
        failures,
        wall_time: start.elapsed().as_secs_f64(),
        level: mc.level,
        bandwidths: hs,
        missing_rates: rate_sum
            .iter()
            .map(|s| s / rate_count.max(1) as f64)
            .collect(),
        statistics,
        p_values,
    })
}

/// A table cell: a labelled design and test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cell {
    pub label: String,
    pub design: SimDesign,
    pub test: TestSelector,
}

fn mech(kind: &str) -> Mechanism {
    if kind == "I" {
        Mechanism::dropout_i()
    } else {
        Mechanism::dropout_ii()
    }
}

const OFFSETS: [(f64, f64); 9] = [
    (0.0, 0.0),
    (0.2, 0.0),
    (0.3, 0.0),
    (0.0, 0.2),
    (0.0, 0.3),
    (0.2, 0.2),
    (0.2, 0.3),
    (0.3, 0.2),
    (0.3, 0.3),
];

fn offset_table(test: TestSelector) -> Vec<Cell> {
    let mut cells = Vec::new();
    for n in [SMALL_N, LARGE_N] {
        for &(d2, d3) in &OFFSETS {
            for t_len in [5, 10] {
                for m in ["I", "II"] {
                    cells.push(Cell {
                        label: format!("n={n:?} D2={d2} D3={d3} T={t_len} mech={m}"),
                        design: SimDesign::three_arm(n, t_len, mech(m), d2, d3),
                        test: test.clone(),
                    });
                }
            }
        }
    }
    cells
}

/// Covariate-effect equality.
pub fn table1() -> Vec<Cell> {
    offset_table(TestSelector::Beta)
}

/// Interaction absence in arm 2, with `β₂ = 2 + γ₂`.
pub fn table2() -> Vec<Cell> {
    let mut cells = Vec::new();
    for n in [SMALL_N, LARGE_N] {
        for g in [0.0, 0.2, 0.3, 0.4] {
            for t_len in [5, 10] {
                for m in ["I", "II"] {
                    cells.push(Cell {
                        label: format!("n={n:?} gamma2={g} T={t_len} mech={m}"),
                        design: table2_design(n, t_len, mech(m), g),
                        test: TestSelector::Interaction { treatment: 1 },
                    });
                }
            }
        }
    }
    cells
}

pub fn table2_design(n: [usize; 3], t_len: usize, mechanism: Mechanism, gamma2: f64) -> SimDesign {
    let mut d = SimDesign::three_arm(n, t_len, mechanism, 0.0, 0.0);
    d.arms[1].gamma = gamma2;
    d.arms[1].beta = 2.0 + gamma2;
    d
}

/// Interaction-effect equality.
pub fn table3() -> Vec<Cell> {
    offset_table(TestSelector::Gamma)
}

pub fn table4_design(
    n: [usize; 3],
    t_len: usize,
    mechanism: Mechanism,
    u: f64,
    v: f64,
) -> SimDesign {
    let mut d = SimDesign::three_arm(n, t_len, mechanism, 0.0, 0.2);
    d.arms[1].shift = Shift::Amplitude { u };
    d.arms[2].shift = Shift::Phase { v };
    d
}

/// Time-effect equality, bootstrap calibrated.
pub fn table4(boot_reps: usize) -> Vec<Cell> {
    let mut cells = Vec::new();
    for n in [SMALL_N, LARGE_N] {
        for (u, v) in [(0.0, 0.0), (0.3, 0.0), (0.5, 0.0), (0.0, 0.05), (0.0, 0.10)] {
            for t_len in [5, 10] {
                for m in ["I", "II"] {
                    cells.push(Cell {
                        label: format!("n={n:?} U={u} V={v} T={t_len} mech={m}"),
                        design: table4_design(n, t_len, mech(m), u, v),
                        test: TestSelector::TimeEffectBootstrap {
                            reps: boot_reps,
                            wild: WildDist::Mammen,
                        },
                    });
                }
            }
        }
    }
    cells
}

/// Two arms, complete data, baseline only; arm 2 shifted by `shift`.
pub fn table5_design(n: [usize; 2], t_len: usize, shift: Shift) -> SimDesign {
    let noise = [NOISE_12, NOISE_12];
    SimDesign {
        arms: (0..2)
            .map(|j| Arm {
                n: n[j],
                beta: 0.0,
                gamma: 0.0,
                shift: if j == 1 { shift } else { Shift::Zero },
                noise: noise[j],
            })
            .collect(),
        t_len,
        mechanism: Mechanism::None,
        covariates: false,
        seed: 0,
    }
}

/// The proposed test against the cumulative comparator.
pub fn table5(boot_reps: usize) -> Vec<Cell> {
    let shifts: Vec<(String, Shift)> = vec![
        ("I U=0".into(), Shift::Zero),
        ("I U=0.3".into(), Shift::Amplitude { u: 0.3 }),
        ("I U=0.5".into(), Shift::Amplitude { u: 0.5 }),
        ("II U=0.05".into(), Shift::Phase { v: 0.05 }),
        ("II U=0.1".into(), Shift::Phase { v: 0.10 }),
        ("III U=0.1".into(), Shift::Constant { c: -0.1 }),
        ("III U=0.2".into(), Shift::Constant { c: -0.2 }),
    ];
    let mut cells = Vec::new();
    for n in [[60, 65], [100, 110]] {
        for (lab, s) in &shifts {
            for t_len in [5, 10] {
                let design = table5_design(n, t_len, *s);
                cells.push(Cell {
                    label: format!("n={n:?} case {lab} T={t_len} EL"),
                    design: design.clone(),
                    test: TestSelector::TimeEffectBootstrap {
                        reps: boot_reps,
                        wild: WildDist::Mammen,
                    },
                });
                cells.push(Cell {
                    label: format!("n={n:?} case {lab} T={t_len} SZ"),
                    design,
                    test: TestSelector::ScheikeZhang { a: 0.0 },
                });
            }
        }
    }
    cells
}

pub fn table(number: u8, boot_reps: usize) -> Result<Vec<Cell>> {
    Ok(match number {
        1 => table1(),
        2 => table2(),
        3 => table3(),
        4 => table4(boot_reps),
        5 => table5(boot_reps),
        _ => {
            return Err(Error::InvalidInput(format!(
                "no table {number}; expected 1 to 5"
            )))
        }
    })
}

/// A four-arm study with three covariates, a covariate-by-time interaction and
/// response-dependent dropout, shaped like a clinical follow-up study. Covariate and
/// interaction effects are common to all arms; arms 1 and 2 share a baseline curve.
pub fn clinical_like_dataset(n: usize, t_len: usize, seed: u64) -> Result<Study> {
    let mut rng = stream(seed, 0, stage::DESIGN);
    let beta = [0.3, 0.5, -0.2];
    let gamma = 0.4;
    let mut samples = Vec::new();
    let spec = PropensitySpec::new(FeatureRule::LagCovariateResponseDiff {
        covariate: 1,
        intercept: true,
    });
    let theta = [2.5, 0.3, -0.4];
    let lift = [0.0, 0.0, 1.0, 2.0];
    for j in 0..4 {
        let mut subjects = Vec::with_capacity(n);
        for i in 0..n {
            let age = normal(1.0).sample(&mut rng);
            let pre = normal(1.0).sample(&mut rng);
            let sex = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
            let e = normal(0.4).sample(&mut rng);
            let mut recs: Vec<ObservationRecord> = (0..t_len)
                .map(|m| {
                    let t = (m as f64 + 0.5 * rng.random::<f64>()) / t_len as f64;
                    let x = vec![age, pre + 0.2 * normal(1.0).sample(&mut rng), sex];
                    let g = (1.0 + 0.15 * lift[j]) * (PI * t).sin() - 0.3 * lift[j] * t;
                    let lin: f64 =
                        x.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() + gamma * x[1] * t;
                    let y = lin + g + e + normal(0.4).sample(&mut rng);
                    ObservationRecord {
                        treatment_id: j as i64 + 1,
                        subject_id: i as i64 + 1,
                        time: t,
                        covariates: Some(x),
                        response: Some(y),
                        observed: true,
                    }
                })
                .collect();
            for m in 1..t_len {
                let keep = recs[m - 1].observed
                    && rng.random::<f64>() < spec.probability(&History::new(&recs, m), &theta);
                if !keep {
                    recs[m].observed = false;
                    recs[m].response = None;
                    recs[m].covariates = None;
                }
            }
            subjects.push(SubjectTrajectory::new(i as i64 + 1, recs, 1));
        }
        samples.push(TreatmentSample {
            treatment_id: j as i64 + 1,
            subjects,
            schedule_length: t_len,
            bandwidth: None,
            propensity: None,
        });
    }
    Study::new(
        samples,
        3,
        InteractionRule::CovariateTime { covariate: 1 },
        1,
    )
}
