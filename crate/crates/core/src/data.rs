//! Longitudinal data model, long-format CSV ingestion and missingness preprocessing.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::SampleFrame;
use crate::kernel::{Kernel, Smoother};
use crate::propensity::PropensityFit;

/// One scheduled visit of a subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub treatment_id: i64,
    pub subject_id: i64,
    pub time: f64,
    pub covariates: Option<Vec<f64>>,
    pub response: Option<f64>,
    /// Raw observation indicator as recorded.
    pub observed: bool,
}

/// All scheduled visits of one subject, sorted by time.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectTrajectory {
    pub subject_id: i64,
    pub records: Vec<ObservationRecord>,
    /// Working indicator after forcing visits with an incomplete lag window to missing.
    pub effective_delta: Vec<bool>,
    /// `∏_{l=1..min(d, m)} δ_{m-l}` over the raw indicators.
    pub delta_lag: Vec<bool>,
}

impl SubjectTrajectory {
    pub fn new(subject_id: i64, records: Vec<ObservationRecord>, lag_d: usize) -> Self {
        let mut s = SubjectTrajectory {
            subject_id,
            records,
            effective_delta: Vec::new(),
            delta_lag: Vec::new(),
        };
        s.apply_forcing_rule(lag_d);
        s
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn raw_delta(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.observed).collect()
    }

    fn apply_forcing_rule(&mut self, lag_d: usize) {
        let (lag, eff) = forcing_rule(&self.raw_delta(), lag_d);
        self.delta_lag = lag;
        self.effective_delta = eff;
    }
}

/// Lag products and effective indicators for a raw δ sequence (first visit at index 0).
pub fn forcing_rule(raw: &[bool], lag_d: usize) -> (Vec<bool>, Vec<bool>) {
    let lag: Vec<bool> = (0..raw.len())
        .map(|m| {
            let window = lag_d.min(m);
            (1..=window).all(|l| raw[m - l])
        })
        .collect();
    let eff = raw.iter().zip(&lag).map(|(&d, &l)| d && l).collect();
    (lag, eff)
}

/// Subjects of one treatment arm.
#[derive(Debug, Clone)]
pub struct TreatmentSample {
    pub treatment_id: i64,
    pub subjects: Vec<SubjectTrajectory>,
    pub schedule_length: usize,
    pub bandwidth: Option<f64>,
    pub propensity: Option<PropensityFit>,
}

impl TreatmentSample {
    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    /// Fraction of scheduled visits whose effective indicator is 0.
    pub fn missing_rate(&self) -> f64 {
        let total = (self.n() * self.schedule_length) as f64;
        let missing = self
            .subjects
            .iter()
            .flat_map(|s| s.effective_delta.iter())
            .filter(|d| !**d)
            .count() as f64;
        missing / total
    }

    pub fn fully_observed(&self) -> bool {
        self.subjects
            .iter()
            .all(|s| s.effective_delta.iter().all(|d| *d))
    }

    /// Inverse-propensity view; `π ≡ 1` when no propensity is attached.
    pub fn frame(&self, interaction: &InteractionRule, p: usize, lag_d: usize) -> SampleFrame {
        match &self.propensity {
            Some(fit) => SampleFrame::build(self, interaction, p, |i, m| {
                fit.pi_cumulative(&self.subjects[i], m, lag_d)
            }),
            None => SampleFrame::build(self, interaction, p, |_, _| 1.0),
        }
    }
}

type RuleFn = dyn Fn(&[f64], f64) -> Vec<f64> + Send + Sync;

/// Maps a covariate vector and time to the interaction vector `M(X, t)`.
#[derive(Clone, Default)]
pub enum InteractionRule {
    /// No interaction (q = 0).
    #[default]
    None,
    /// `x_c · t`.
    CovariateTime { covariate: usize },
    /// `t · (x_c - shift)^2`.
    ShiftedSquareTime { covariate: usize, shift: f64 },
    Custom {
        name: String,
        dim: usize,
        rule: Arc<RuleFn>,
    },
}

impl InteractionRule {
    pub fn dim(&self) -> usize {
        match self {
            InteractionRule::None => 0,
            InteractionRule::CovariateTime { .. } | InteractionRule::ShiftedSquareTime { .. } => 1,
            InteractionRule::Custom { dim, .. } => *dim,
        }
    }

    pub fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        match self {
            InteractionRule::None => Vec::new(),
            InteractionRule::CovariateTime { covariate } => vec![x[*covariate] * t],
            InteractionRule::ShiftedSquareTime { covariate, shift } => {
                let d = x[*covariate] - shift;
                vec![t * d * d]
            }
            InteractionRule::Custom { rule, .. } => rule(x, t),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            InteractionRule::None => "none".into(),
            InteractionRule::CovariateTime { covariate } => format!("x{}*t", covariate + 1),
            InteractionRule::ShiftedSquareTime { covariate, shift } => {
                format!("t*(x{}-{})^2", covariate + 1, shift)
            }
            InteractionRule::Custom { name, .. } => name.clone(),
        }
    }

    pub fn custom<F>(name: impl Into<String>, dim: usize, rule: F) -> Self
    where
        F: Fn(&[f64], f64) -> Vec<f64> + Send + Sync + 'static,
    {
        InteractionRule::Custom {
            name: name.into(),
            dim,
            rule: Arc::new(rule),
        }
    }
}

impl fmt::Debug for InteractionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "InteractionRule({})", self.describe())
    }
}

/// Affine map from raw times to `[0, 1]`: `t = (raw - offset) * scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeMap {
    pub offset: f64,
    pub scale: f64,
}

impl TimeMap {
    pub fn to_unit(&self, raw: f64) -> f64 {
        (raw - self.offset) * self.scale
    }

    pub fn to_raw(&self, t: f64) -> f64 {
        t / self.scale + self.offset
    }
}

/// `k` treatment samples sharing covariate and interaction dimensions.
#[derive(Debug, Clone)]
pub struct Study {
    pub samples: Vec<TreatmentSample>,
    pub p: usize,
    pub interaction: InteractionRule,
    pub lag_d: usize,
    pub time_map: Option<TimeMap>,
}

impl Study {
    pub fn new(
        samples: Vec<TreatmentSample>,
        p: usize,
        interaction: InteractionRule,
        lag_d: usize,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput(
                "a study needs at least one treatment".into(),
            ));
        }
        if lag_d == 0 {
            return Err(Error::InvalidInput("lag d must be positive".into()));
        }
        for (j, s) in samples.iter().enumerate() {
            if s.n() < 2 {
                return Err(Error::EmptySample(j));
            }
            if lag_d > s.schedule_length {
                return Err(Error::InvalidInput(format!(
                    "lag d = {lag_d} exceeds schedule length {} of treatment {}",
                    s.schedule_length, s.treatment_id
                )));
            }
        }
        let mut study = Study {
            samples,
            p,
            interaction,
            lag_d,
            time_map: None,
        };
        study.refresh_indicators();
        Ok(study)
    }

    pub fn k(&self) -> usize {
        self.samples.len()
    }

    pub fn q(&self) -> usize {
        self.interaction.dim()
    }

    pub fn with_interaction(mut self, rule: InteractionRule) -> Self {
        self.interaction = rule;
        self
    }

    pub fn with_lag(mut self, lag_d: usize) -> Result<Self> {
        if lag_d == 0 || self.samples.iter().any(|s| lag_d > s.schedule_length) {
            return Err(Error::InvalidInput(format!("invalid lag d = {lag_d}")));
        }
        self.lag_d = lag_d;
        self.refresh_indicators();
        Ok(self)
    }

    /// Keeps only the treatments at the given positions, in the given order.
    pub fn subset(&self, positions: &[usize]) -> Result<Study> {
        let mut samples = Vec::with_capacity(positions.len());
        for &j in positions {
            let s = self
                .samples
                .get(j)
                .ok_or_else(|| Error::InvalidInput(format!("no treatment at position {j}")))?;
            samples.push(s.clone());
        }
        Ok(Study {
            samples,
            p: self.p,
            interaction: self.interaction.clone(),
            lag_d: self.lag_d,
            time_map: self.time_map,
        })
    }

    pub fn frames(&self) -> Vec<SampleFrame> {
        self.samples
            .iter()
            .map(|s| s.frame(&self.interaction, self.p, self.lag_d))
            .collect()
    }

    fn refresh_indicators(&mut self) {
        let d = self.lag_d;
        for s in &mut self.samples {
            for subj in &mut s.subjects {
                subj.apply_forcing_rule(d);
            }
        }
    }

    /// Builds a study from flat records, grouping by treatment and subject.
    pub fn from_records(
        records: Vec<ObservationRecord>,
        p: usize,
        interaction: InteractionRule,
        lag_d: usize,
    ) -> Result<Study> {
        let mut grouped: BTreeMap<i64, BTreeMap<i64, Vec<ObservationRecord>>> = BTreeMap::new();
        for r in records {
            grouped
                .entry(r.treatment_id)
                .or_default()
                .entry(r.subject_id)
                .or_default()
                .push(r);
        }
        let mut samples = Vec::new();
        for (tid, subjects) in grouped {
            let mut trajs = Vec::new();
            let mut schedule = None;
            for (sid, mut recs) in subjects {
                recs.sort_by(|a, b| a.time.total_cmp(&b.time));
                for w in recs.windows(2) {
                    if w[0].time == w[1].time {
                        return Err(Error::DuplicateTime {
                            treatment: tid,
                            subject: sid,
                            time: w[0].time,
                        });
                    }
                }
                if !recs[0].observed {
                    return Err(Error::FirstVisitMissing {
                        treatment: tid,
                        subject: sid,
                    });
                }
                let expected = *schedule.get_or_insert(recs.len());
                if recs.len() != expected {
                    return Err(Error::RaggedSchedule {
                        treatment: tid,
                        subject: sid,
                        expected,
                        found: recs.len(),
                    });
                }
                trajs.push(SubjectTrajectory::new(sid, recs, lag_d));
            }
            samples.push(TreatmentSample {
                treatment_id: tid,
                schedule_length: schedule.unwrap_or(0),
                subjects: trajs,
                bandwidth: None,
                propensity: None,
            });
        }
        Study::new(samples, p, interaction, lag_d)
    }

    pub fn records(&self) -> impl Iterator<Item = &ObservationRecord> {
        self.samples
            .iter()
            .flat_map(|s| s.subjects.iter())
            .flat_map(|s| s.records.iter())
    }
}

/// Column names of the long-format CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub treatment: String,
    pub subject: String,
    pub time: String,
    pub observed: String,
    pub response: String,
    /// Covariate columns; when `None`, every `x<k>` column in numeric order.
    pub covariates: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            treatment: "treatment".into(),
            subject: "subject".into(),
            time: "time".into(),
            observed: "observed".into(),
            response: "y".into(),
            covariates: None,
        }
    }
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::MalformedRow {
            line: 1,
            message: format!("missing column `{name}`"),
        })
}

fn parse_flag(s: &str) -> Option<bool> {
    match s.trim() {
        "1" | "true" | "TRUE" | "True" => Some(true),
        "0" | "false" | "FALSE" | "False" => Some(false),
        _ => None,
    }
}

/// Reads a long-format CSV into a [`Study`] with `lag_d = 1` and no interaction.
///
/// Times outside `[0, 1]` are min–max rescaled; the map is kept in `time_map`.
pub fn load_long_csv<R: Read>(source: R, schema: &CsvSchema) -> Result<Study> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = rdr
        .headers()
        .map_err(|e| Error::MalformedRow {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let c_treat = column(&headers, &schema.treatment)?;
    let c_subj = column(&headers, &schema.subject)?;
    let c_time = column(&headers, &schema.time)?;
    let c_obs = column(&headers, &schema.observed)?;
    let c_y = column(&headers, &schema.response)?;
    let c_x: Vec<usize> = match &schema.covariates {
        Some(names) => names
            .iter()
            .map(|n| column(&headers, n))
            .collect::<Result<_>>()?,
        None => {
            let mut xs: Vec<(usize, usize)> = headers
                .iter()
                .enumerate()
                .filter_map(|(i, h)| {
                    let h = h.trim();
                    h.strip_prefix('x')
                        .and_then(|k| k.parse::<usize>().ok())
                        .map(|k| (k, i))
                })
                .collect();
            xs.sort();
            xs.into_iter().map(|(_, i)| i).collect()
        }
    };
    let p = c_x.len();

    let mut records = Vec::new();
    for (row_idx, row) in rdr.records().enumerate() {
        let line = row_idx + 2;
        let row = row.map_err(|e| Error::MalformedRow {
            line,
            message: e.to_string(),
        })?;
        if row.len() != headers.len() {
            return Err(Error::InconsistentDimension {
                expected: headers.len(),
                found: row.len(),
            });
        }
        let bad = |what: &str| Error::MalformedRow {
            line,
            message: format!("cannot parse {what}"),
        };
        let treatment_id: i64 = row[c_treat].parse().map_err(|_| bad("treatment"))?;
        let subject_id: i64 = row[c_subj].parse().map_err(|_| bad("subject"))?;
        let time: f64 = row[c_time].parse().map_err(|_| bad("time"))?;
        if !time.is_finite() {
            return Err(bad("time"));
        }
        let observed = parse_flag(&row[c_obs]).ok_or_else(|| bad("observed flag"))?;
        let y_cell = row[c_y].trim();
        let x_cells: Vec<&str> = c_x.iter().map(|&c| row[c].trim()).collect();
        let any_present = !y_cell.is_empty() || x_cells.iter().any(|c| !c.is_empty());
        let all_present = !y_cell.is_empty() && x_cells.iter().all(|c| !c.is_empty());
        let (covariates, response) = if observed {
            if !all_present {
                return Err(Error::ContradictoryMissingness { line });
            }
            let xs = x_cells
                .iter()
                .map(|c| c.parse::<f64>().map_err(|_| bad("covariate")))
                .collect::<Result<Vec<f64>>>()?;
            let y: f64 = y_cell.parse().map_err(|_| bad("response"))?;
            (Some(xs), Some(y))
        } else {
            if any_present {
                return Err(Error::ContradictoryMissingness { line });
            }
            (None, None)
        };
        records.push(ObservationRecord {
            treatment_id,
            subject_id,
            time,
            covariates,
            response,
            observed,
        });
    }
    if records.is_empty() {
        return Err(Error::InvalidInput("no data rows".into()));
    }

    let lo = records.iter().map(|r| r.time).fold(f64::INFINITY, f64::min);
    let hi = records
        .iter()
        .map(|r| r.time)
        .fold(f64::NEG_INFINITY, f64::max);
    let time_map = if lo < 0.0 || hi > 1.0 {
        if hi <= lo {
            return Err(Error::InvalidInput("all visit times are equal".into()));
        }
        let map = TimeMap {
            offset: lo,
            scale: 1.0 / (hi - lo),
        };
        for r in &mut records {
            r.time = map.to_unit(r.time).clamp(0.0, 1.0);
        }
        Some(map)
    } else {
        None
    };

    let mut study = Study::from_records(records, p, InteractionRule::None, 1)?;
    study.time_map = time_map;
    Ok(study)
}

/// Writes the study back in long format (times on the `[0, 1]` scale).
pub fn write_long_csv<W: Write>(study: &Study, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec![
        "treatment".to_string(),
        "subject".into(),
        "time".into(),
        "observed".into(),
        "y".into(),
    ];
    header.extend((1..=study.p).map(|k| format!("x{k}")));
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(&header).map_err(io)?;
    for r in study.records() {
        let mut row = vec![
            r.treatment_id.to_string(),
            r.subject_id.to_string(),
            r.time.to_string(),
            if r.observed { "1" } else { "0" }.to_string(),
            r.response.map(|y| y.to_string()).unwrap_or_default(),
        ];
        match &r.covariates {
            Some(xs) => row.extend(xs.iter().map(|x| x.to_string())),
            None => row.extend(std::iter::repeat_n(String::new(), study.p)),
        }
        w.write_record(&row).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Recomputes lag products and effective indicators from the raw flags.
pub fn preprocess_missingness(study: &Study) -> Study {
    let mut out = study.clone();
    out.refresh_indicators();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Ok,
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentValidation {
    pub treatment: i64,
    pub n: usize,
    #[serde(rename = "T")]
    pub schedule_length: usize,
    pub missing_rate: f64,
    pub sigma_x_min_eig: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub severity: Severity,
    pub pooled_sigma_x_min_eig: f64,
    pub treatments: Vec<TreatmentValidation>,
}

/// Absolute eigenvalue floor under which the design is flagged unidentifiable.
pub const SIGMA_X_EIG_FLOOR: f64 = 1e-8;
/// Floor on the smallest eigenvalue of the centered moment in correlation scale.
pub const SIGMA_X_STANDARDIZED_FLOOR: f64 = 0.02;

/// Rule-of-thumb bandwidth used when a sample has no bandwidth yet.
pub fn default_bandwidth(sample: &TreatmentSample) -> f64 {
    let times: Vec<f64> = sample
        .subjects
        .iter()
        .flat_map(|s| s.records.iter().map(|r| r.time))
        .collect();
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let sd = (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    (1.06 * sd * (sample.n() as f64).powf(-0.2)).max(1e-3)
}

struct Moments {
    centered: DMatrix<f64>,
    raw_var: Vec<f64>,
    weight: f64,
}

fn design_moments(frame: &SampleFrame, h: f64) -> Result<Moments> {
    let d = frame.dim();
    let design = frame.design();
    let centered = Smoother::new(frame, Kernel::Epanechnikov, h).center_rows(&design, d)?;
    let n = frame.len();
    let mut s = DMatrix::zeros(d, d);
    for a in 0..n {
        let row = &centered[a * d..(a + 1) * d];
        for r in 0..d {
            for c in 0..d {
                s[(r, c)] += row[r] * row[c];
            }
        }
    }
    let mut raw_var = vec![0.0; d];
    for (c, v) in raw_var.iter_mut().enumerate() {
        let mean = (0..n).map(|a| design[a * d + c]).sum::<f64>() / n as f64;
        *v = (0..n)
            .map(|a| (design[a * d + c] - mean).powi(2))
            .sum::<f64>();
    }
    Ok(Moments {
        centered: s,
        raw_var,
        weight: n as f64,
    })
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

fn standardized_min_eig(m: &DMatrix<f64>, raw_var: &[f64]) -> f64 {
    let d = m.nrows();
    let mut s = m.clone();
    for r in 0..d {
        for c in 0..d {
            let denom = (raw_var[r] * raw_var[c]).sqrt();
            s[(r, c)] = if denom > 0.0 { m[(r, c)] / denom } else { 0.0 };
        }
    }
    min_eig(&s)
}

/// Missing fractions and identifiability diagnostics of the centered design.
pub fn validate(study: &Study) -> ValidationReport {
    let mut treatments = Vec::new();
    let mut severity = Severity::Ok;
    let d = study.p + study.q();
    let mut pooled = DMatrix::zeros(d, d);
    let mut pooled_weight = 0.0;
    for sample in &study.samples {
        let mut warnings = Vec::new();
        let frame = sample.frame(&study.interaction, study.p, study.lag_d);
        let h = sample
            .bandwidth
            .unwrap_or_else(|| default_bandwidth(sample));
        let mut eig = f64::NAN;
        if sample.n() < 2 {
            warnings.push("fewer than two subjects".into());
            severity = Severity::Error;
        }
        match design_moments(&frame, h) {
            Ok(mom) => {
                let normalized = &mom.centered / mom.weight;
                eig = min_eig(&normalized);
                let std_eig = standardized_min_eig(&mom.centered, &mom.raw_var);
                if eig < SIGMA_X_EIG_FLOOR || std_eig < SIGMA_X_STANDARDIZED_FLOOR {
                    warnings.push(format!(
                        "centered design moment is near-singular (min eigenvalue {eig:.3e}, \
                         standardized {std_eig:.3e}); an interaction may be a pure function of time"
                    ));
                    severity = severity.max(Severity::Warning);
                }
                pooled += mom.centered;
                pooled_weight += mom.weight;
            }
            Err(e) => {
                warnings.push(format!("centering failed: {e}"));
                severity = Severity::Error;
            }
        }
        let missing_rate = sample.missing_rate();
        if missing_rate > 0.5 {
            warnings.push(format!("high missing rate {missing_rate:.3}"));
            severity = severity.max(Severity::Warning);
        }
        treatments.push(TreatmentValidation {
            treatment: sample.treatment_id,
            n: sample.n(),
            schedule_length: sample.schedule_length,
            missing_rate,
            sigma_x_min_eig: eig,
            warnings,
        });
    }
    let pooled_sigma_x_min_eig = if pooled_weight > 0.0 {
        min_eig(&(pooled / pooled_weight))
    } else {
        f64::NAN
    };
    ValidationReport {
        severity,
        pooled_sigma_x_min_eig,
        treatments,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bools(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&b| b == 1).collect()
    }

    #[test]
    fn forcing_rule_no_missingness() {
        let (lag, eff) = forcing_rule(&bools(&[1, 1, 1, 1, 1]), 2);
        assert!(lag.iter().all(|l| *l));
        assert_eq!(eff, bools(&[1, 1, 1, 1, 1]));
    }

    #[test]
    fn forcing_rule_gap_forces_following_visits() {
        let (lag, eff) = forcing_rule(&bools(&[1, 0, 1, 1, 1]), 2);
        // 1-based position 3 has δ₂ = 0 in its window
        assert!(!lag[2]);
        assert!(!eff[2]);
        assert!(!eff[3]);
        assert!(eff[4], "window (δ₃, δ₄) is complete again");
    }

    #[test]
    fn forcing_rule_truncates_early_windows() {
        let (lag, _) = forcing_rule(&bools(&[1, 1]), 5);
        assert_eq!(lag, vec![true, true]);
        let (lag, _) = forcing_rule(&bools(&[1, 0, 1]), 5);
        assert_eq!(lag, vec![true, true, false]);
    }

    const SMALL: &str = "treatment,subject,time,observed,y,x1\n\
        1,1,0.0,1,1.5,0.2\n1,1,0.5,1,1.7,0.3\n1,1,1.0,1,1.1,0.1\n\
        1,2,0.1,1,0.5,0.4\n1,2,0.6,1,0.7,0.9\n1,2,0.9,1,0.2,0.5\n";

    #[test]
    fn loads_fully_observed_file() {
        let s = load_long_csv(SMALL.as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(s.k(), 1);
        assert_eq!(s.samples[0].n(), 2);
        assert_eq!(s.p, 1);
        assert!(s
            .records()
            .all(|r| r.covariates.is_some() && r.response.is_some()));
        assert!(s.time_map.is_none());
    }

    #[test]
    fn observed_zero_with_response_is_contradictory() {
        let bad = "treatment,subject,time,observed,y,x1\n1,1,0.0,1,1.0,1.0\n1,1,0.5,0,2.0,\n";
        let err = load_long_csv(bad.as_bytes(), &CsvSchema::default()).unwrap_err();
        assert_eq!(err, Error::ContradictoryMissingness { line: 3 });
        assert!(err.to_string().contains("contradictory missingness flag"));
    }

    #[test]
    fn week_times_are_rescaled() {
        let mut s = String::from("treatment,subject,time,observed,y,x1\n");
        for subj in 1..=2 {
            for (m, wk) in [1.0, 20.0, 40.0].iter().enumerate() {
                s += &format!("1,{subj},{wk},1,{},{}\n", m as f64, subj as f64);
            }
        }
        let st = load_long_csv(s.as_bytes(), &CsvSchema::default()).unwrap();
        let map = st.time_map.unwrap();
        assert!((map.scale - 1.0 / 39.0).abs() < 1e-15);
        assert_eq!(map.offset, 1.0);
        let times: Vec<f64> = st.samples[0].subjects[0]
            .records
            .iter()
            .map(|r| r.time)
            .collect();
        assert_eq!(times[0], 0.0);
        assert_eq!(times[2], 1.0);
        assert!((times[1] - 19.0 / 39.0).abs() < 1e-15);
    }

    #[test]
    fn ingestion_errors() {
        let dup = "treatment,subject,time,observed,y,x1\n1,1,0.1,1,1,1\n1,1,0.1,1,1,1\n1,2,0.1,1,1,1\n1,2,0.2,1,1,1\n";
        assert!(matches!(
            load_long_csv(dup.as_bytes(), &CsvSchema::default()),
            Err(Error::DuplicateTime { .. })
        ));
        let first = "treatment,subject,time,observed,y,x1\n1,1,0.1,0,,\n1,1,0.2,1,1,1\n";
        assert!(matches!(
            load_long_csv(first.as_bytes(), &CsvSchema::default()),
            Err(Error::FirstVisitMissing { .. })
        ));
        let malformed = "treatment,subject,time,observed,y,x1\n1,1,abc,1,1,1\n";
        assert!(matches!(
            load_long_csv(malformed.as_bytes(), &CsvSchema::default()),
            Err(Error::MalformedRow { line: 2, .. })
        ));
        let ragged =
            "treatment,subject,time,observed,y,x1\n1,1,0.1,1,1,1\n1,1,0.2,1,1,1\n1,2,0.1,1,1,1\n";
        assert!(matches!(
            load_long_csv(ragged.as_bytes(), &CsvSchema::default()),
            Err(Error::RaggedSchedule { .. })
        ));
        let short = "treatment,subject,time,observed,y,x1\n1,1,0.1,1,1\n";
        assert!(load_long_csv(short.as_bytes(), &CsvSchema::default()).is_err());
    }

    #[test]
    fn single_subject_treatment_is_rejected() {
        let one = "treatment,subject,time,observed,y,x1\n1,1,0.1,1,1,1\n1,1,0.2,1,1,1\n";
        assert_eq!(
            load_long_csv(one.as_bytes(), &CsvSchema::default()).unwrap_err(),
            Error::EmptySample(0)
        );
    }

    #[test]
    fn preprocess_is_idempotent() {
        let s = load_long_csv(SMALL.as_bytes(), &CsvSchema::default()).unwrap();
        let a = preprocess_missingness(&s);
        let b = preprocess_missingness(&a);
        for (x, y) in a.samples[0].subjects.iter().zip(&b.samples[0].subjects) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn serialize_round_trip() {
        let s = load_long_csv(SMALL.as_bytes(), &CsvSchema::default()).unwrap();
        let mut buf = Vec::new();
        write_long_csv(&s, &mut buf).unwrap();
        let again = load_long_csv(buf.as_slice(), &CsvSchema::default()).unwrap();
        let a: Vec<_> = s.records().cloned().collect();
        let b: Vec<_> = again.records().cloned().collect();
        assert_eq!(a, b);
    }
}
