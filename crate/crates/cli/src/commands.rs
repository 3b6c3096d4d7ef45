use std::path::Path;

use anyhow::{bail, Context, Result};
use elanova::bandwidth::{cv_bandwidth, default_grid, CVResult};
use elanova::covariate::{anova_beta_test, anova_gamma_test, interaction_presence_test};
use elanova::data::{default_bandwidth, load_long_csv, validate, write_long_csv, Severity};
use elanova::kernel::Kernel;
use elanova::propensity::{
    attach_propensity, compare_propensity_models, fit_propensity, ModelScore,
};
use elanova::report::DEFAULT_LEVELS;
use elanova::sim::{clinical_like_dataset, monte_carlo, table, MonteCarlo};
use elanova::time_effect::{asymptotic_g_test, TimeEffectFit};
use elanova::{
    BootstrapConfig, CovariateConfig, CsvSchema, IntegratedStatConfig, PropensitySpec, Study,
    TestReport, WeightFn, WildDist,
};
use serde::Serialize;

use crate::cli::{
    AnovaArgs, AnovaOptions, BandwidthArgs, DataArgs, Hypothesis, PropensityArgs, SimulateArgs,
    TableFormat, Weight,
};
use crate::parse::{self, BandwidthChoice};
use crate::provenance::{read_input, write_json, write_text, Provenance};
use crate::Usage;

const KERNEL: Kernel = Kernel::Epanechnikov;
const DEFAULT_BOOT_SEED: u64 = 20_240_101;

/// Loads the CSV and applies the interaction rule and dropout lag.
fn load(
    data: &Path,
    interaction: Option<&str>,
    lag_d: Option<usize>,
    prov: &mut Provenance,
) -> Result<Study> {
    let (bytes, info) = read_input(data)?;
    prov.input = Some(info);
    let study = load_long_csv(bytes.as_slice(), &CsvSchema::default())
        .with_context(|| format!("loading {}", data.display()))?;
    let rule = parse::interaction(interaction.unwrap_or("none"), study.p).map_err(Usage::wrap)?;
    prov.set("interaction", rule.describe());
    let mut study = study.with_interaction(rule);
    let d = lag_d.unwrap_or(1);
    if d != 1 {
        study = study.with_lag(d).map_err(|e| Usage::wrap(e.into()))?;
    }
    prov.set("lag_d", d);
    prov.set("p", study.p);
    prov.set("q", study.q());
    Ok(study)
}

/// Positions of the requested treatment ids, in the requested order.
fn positions(study: &Study, ids: &[i64]) -> Result<Vec<usize>> {
    ids.iter()
        .map(|id| {
            study
                .samples
                .iter()
                .position(|s| s.treatment_id == *id)
                .ok_or_else(|| Usage::wrap(anyhow::anyhow!("no treatment with id {id}")))
        })
        .collect()
}

fn propensity_spec(rule: Option<&str>, p: usize) -> Result<PropensitySpec> {
    match rule {
        Some(r) => parse::propensity(r, p).map_err(Usage::wrap),
        None => Ok(parse::default_propensity(p)),
    }
}

fn attach(study: &mut Study, spec: &PropensitySpec, prov: &mut Provenance) -> Result<()> {
    attach_propensity(study, &vec![spec.clone(); study.k()])
        .context("fitting the propensity model")?;
    prov.set("propensity_rule", spec.name());
    Ok(())
}

/// Bandwidth per treatment; the study's propensity weights enter the score.
fn choose_bandwidths(study: &mut Study, choice: BandwidthChoice) -> Result<Vec<Option<CVResult>>> {
    let frames = study.frames();
    let mut out = Vec::with_capacity(frames.len());
    for (sample, frame) in study.samples.iter_mut().zip(&frames) {
        let (h, cv) = match choice {
            BandwidthChoice::Fixed(h) => (h, None),
            BandwidthChoice::RuleOfThumb => (default_bandwidth(sample), None),
            BandwidthChoice::CrossValidation => {
                let r = cv_bandwidth(frame, KERNEL, &default_grid(frame)).with_context(|| {
                    format!("cross-validating treatment {}", sample.treatment_id)
                })?;
                (r.h_star, Some(r))
            }
        };
        sample.bandwidth = Some(h);
        out.push(cv);
    }
    Ok(out)
}

fn read_config(path: &Path) -> Result<AnovaOptions> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(Usage::wrap)
}

#[derive(Serialize)]
struct Reports {
    reports: Vec<TestReport>,
}

pub fn anova(args: AnovaArgs) -> Result<()> {
    let mut opts = args.opts;
    opts.interaction = args.data.interaction.clone();
    opts.lag_d = args.data.lag_d;
    if let Some(path) = &args.config {
        opts = opts.merge(read_config(path)?);
    }
    let Some(hypothesis) = opts.hypothesis else {
        return Err(Usage::msg(
            "--hypothesis is required (beta, gamma, interaction or g)",
        ));
    };
    let mut prov = Provenance::new("anova");
    let mut study = load(
        &args.data.data,
        opts.interaction.as_deref(),
        opts.lag_d,
        &mut prov,
    )?;
    if let Some(ids) = &opts.groups {
        if ids.len() < 2 && hypothesis != Hypothesis::Interaction {
            return Err(Usage::msg("--groups needs at least two treatment ids"));
        }
        study = study.subset(&positions(&study, ids)?)?;
    }
    let spec = propensity_spec(opts.propensity.as_deref(), study.p)?;
    attach(&mut study, &spec, &mut prov)?;
    let choice =
        parse::bandwidth(opts.bandwidth.as_deref().unwrap_or("cv")).map_err(Usage::wrap)?;
    choose_bandwidths(&mut study, choice)?;
    prov.set("bandwidth_rule", opts.bandwidth.as_deref().unwrap_or("cv"));
    prov.set("kernel", KERNEL);

    let mut levels = DEFAULT_LEVELS.to_vec();
    if let Some(extra) = &opts.levels {
        if extra.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Usage::msg("levels must lie in (0, 1)"));
        }
        levels.extend(extra);
        levels.sort_by(f64::total_cmp);
        levels.dedup();
    }
    let cov = CovariateConfig {
        kernel: KERNEL,
        levels: levels.clone(),
    };

    let mut reports = match hypothesis {
        Hypothesis::Beta => vec![anova_beta_test(&study, &cov)?],
        Hypothesis::Gamma => vec![anova_gamma_test(&study, &cov)?],
        Hypothesis::Interaction => {
            if study.q() == 0 {
                return Err(Usage::msg("--hypothesis interaction needs --interaction"));
            }
            let targets = match opts.treatment {
                Some(id) => positions(&study, &[id])?,
                None => (0..study.k()).collect(),
            };
            targets
                .into_iter()
                .map(|j| interaction_presence_test(&study, j, &cov))
                .collect::<elanova::Result<Vec<_>>>()?
        }
        Hypothesis::G => {
            let stat = IntegratedStatConfig {
                weight_fn: match opts.weight.unwrap_or(Weight::Kde) {
                    Weight::Uniform => WeightFn::Uniform,
                    Weight::Kde => WeightFn::PooledTimeKde,
                },
                zero_xi: study.p == 0 && study.q() == 0,
                kernel: KERNEL,
                ..Default::default()
            };
            if let Some(path) = &opts.curves {
                write_curves(&study, &stat, path)?;
            }
            let report = match opts.bootstrap {
                Some(reps) => {
                    let wild: WildDist = opts
                        .wild
                        .as_deref()
                        .unwrap_or("mammen")
                        .parse()
                        .map_err(|e: elanova::Error| Usage::wrap(e.into()))?;
                    let cfg = BootstrapConfig {
                        reps,
                        wild,
                        seed: opts.seed.unwrap_or(DEFAULT_BOOT_SEED),
                        ..Default::default()
                    };
                    if reps < elanova::bootstrap::MIN_REPS {
                        return Err(Usage::msg(format!(
                            "--bootstrap needs at least {} replicates",
                            elanova::bootstrap::MIN_REPS
                        )));
                    }
                    prov.seed = Some(cfg.seed);
                    elanova::bootstrap::bootstrap_timeeffect_test(&study, &cfg, &stat)?
                }
                None => asymptotic_g_test(&study, &stat)?,
            };
            vec![report]
        }
    };
    for r in &mut reports {
        r.set_levels(&levels);
    }
    write_json(args.data.output.as_deref(), &prov, &Reports { reports })
}

/// Bias-corrected time curve of every treatment on the statistic's grid.
fn write_curves(study: &Study, stat: &IntegratedStatConfig, path: &Path) -> Result<()> {
    let fit = TimeEffectFit::new(study, stat)?;
    let grid = stat.grid();
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["treatment", "t", "time", "g_hat", "valid"])?;
    for (id, s) in fit.treatments.iter().zip(&fit.samples) {
        let curve = s.curve_bias_corrected(&grid);
        for ((t, g), ok) in curve.grid.iter().zip(&curve.values).zip(&curve.valid) {
            let raw = study.time_map.map(|m| m.to_raw(*t)).unwrap_or(*t);
            w.write_record([
                id.to_string(),
                t.to_string(),
                raw.to_string(),
                g.to_string(),
                ok.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SelectedModel {
    model: String,
    theta_hat: Vec<f64>,
    converged: bool,
}

#[derive(Serialize)]
struct PropensityRow {
    treatment: i64,
    missing_rate: f64,
    models: Vec<ModelScore>,
    selected: Option<SelectedModel>,
}

#[derive(Serialize)]
struct PropensityBody {
    treatments: Vec<PropensityRow>,
}

pub fn fit_propensity_cmd(args: PropensityArgs) -> Result<()> {
    let mut prov = Provenance::new("fit-propensity");
    let study = load(
        &args.data.data,
        args.data.interaction.as_deref(),
        args.data.lag_d,
        &mut prov,
    )?;
    let specs = args
        .models
        .iter()
        .map(|m| parse::propensity(m, study.p))
        .collect::<Result<Vec<_>>>()
        .map_err(Usage::wrap)?;
    prov.set("models", specs.iter().map(|s| s.name()).collect::<Vec<_>>());
    let mut rows = Vec::new();
    for sample in &study.samples {
        let models = if specs.len() >= 2 {
            compare_propensity_models(sample, &specs, study.lag_d)?
        } else {
            let spec = &specs[0];
            vec![match fit_propensity(sample, spec, study.lag_d) {
                Ok(f) => ModelScore {
                    model: spec.name(),
                    dim: spec.dim(),
                    loglik: Some(f.loglik),
                    aic: Some(f.aic),
                    bic: Some(f.bic),
                    delta_aic: Some(0.0),
                    delta_bic: Some(0.0),
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
            }]
        };
        let selected = models
            .first()
            .filter(|m| m.error.is_none())
            .and_then(|m| specs.iter().find(|s| s.name() == m.model))
            .and_then(|s| fit_propensity(sample, s, study.lag_d).ok())
            .map(|f| SelectedModel {
                model: f.spec.name(),
                theta_hat: f.theta_hat,
                converged: f.converged,
            });
        rows.push(PropensityRow {
            treatment: sample.treatment_id,
            missing_rate: sample.missing_rate(),
            models,
            selected,
        });
    }
    write_json(
        args.data.output.as_deref(),
        &prov,
        &PropensityBody { treatments: rows },
    )
}

#[derive(Serialize)]
struct BandwidthRow {
    treatment: i64,
    h_star: f64,
    h_grid: Vec<f64>,
    /// `null` where some left-out subject had an empty window.
    scores: Vec<Option<f64>>,
}

#[derive(Serialize)]
struct BandwidthBody {
    treatments: Vec<BandwidthRow>,
}

pub fn bandwidth_cmd(args: BandwidthArgs) -> Result<()> {
    let mut prov = Provenance::new("bandwidth");
    let mut study = load(
        &args.data.data,
        args.data.interaction.as_deref(),
        args.data.lag_d,
        &mut prov,
    )?;
    let spec = propensity_spec(args.propensity.as_deref(), study.p)?;
    attach(&mut study, &spec, &mut prov)?;
    if let Some(g) = &args.grid {
        if g.is_empty() || g.iter().any(|h| !(*h > 0.0)) {
            return Err(Usage::msg("--grid must hold positive bandwidths"));
        }
    }
    let mut rows = Vec::new();
    for (sample, frame) in study.samples.iter().zip(study.frames()) {
        let grid = args.grid.clone().unwrap_or_else(|| default_grid(&frame));
        let r = cv_bandwidth(&frame, KERNEL, &grid)
            .with_context(|| format!("cross-validating treatment {}", sample.treatment_id))?;
        rows.push(BandwidthRow {
            treatment: sample.treatment_id,
            h_star: r.h_star,
            h_grid: r.h_grid,
            scores: r
                .scores
                .iter()
                .map(|s| s.is_finite().then_some(*s))
                .collect(),
        });
    }
    prov.set("kernel", KERNEL);
    write_json(
        args.data.output.as_deref(),
        &prov,
        &BandwidthBody { treatments: rows },
    )
}

#[derive(Debug, Serialize)]
struct CellRow {
    label: String,
    test: String,
    reps: usize,
    failures: usize,
    rejections: usize,
    rate: f64,
    std_error: f64,
    missing_rates: Vec<f64>,
    bandwidths: Vec<f64>,
}

#[derive(Serialize)]
struct TableBody {
    table: u8,
    level: f64,
    cells: Vec<CellRow>,
}

pub fn simulate(args: SimulateArgs) -> Result<()> {
    let mut prov = Provenance::new("simulate");
    prov.seed = Some(args.seed);
    if args.example_data {
        if args.subjects < 3 || args.visits < 2 {
            return Err(Usage::msg(
                "--example-data needs at least 3 subjects and 2 visits",
            ));
        }
        let study = clinical_like_dataset(args.subjects, args.visits, args.seed)?;
        let mut buf = Vec::new();
        write_long_csv(&study, &mut buf)?;
        return write_text(args.output.as_deref(), std::str::from_utf8(&buf)?);
    }
    let number = args.table.expect("clap enforces --table");
    if args.reps == 0 {
        return Err(Usage::msg("--reps must be positive"));
    }
    if !(args.level > 0.0 && args.level <= 1.0) {
        return Err(Usage::msg("--level must lie in (0, 1]"));
    }
    let cells = table(number, args.boot_reps).map_err(|e| Usage::wrap(e.into()))?;
    prov.set("reps", args.reps);
    prov.set("boot_reps", args.boot_reps);
    let mc = MonteCarlo::new(args.reps, args.level);
    let mut rows = Vec::new();
    for cell in cells {
        if let Some(f) = &args.filter {
            if !cell.label.contains(f.as_str()) {
                continue;
            }
        }
        let design = cell.design.clone().with_seed(args.seed);
        let r = monte_carlo(&design, &cell.test, &mc)
            .with_context(|| format!("cell {}", cell.label))?;
        log::info!("{}: rate {:.3} in {:.1}s", cell.label, r.rate, r.wall_time);
        rows.push(CellRow {
            label: cell.label,
            test: r.test.clone(),
            reps: r.reps,
            failures: r.failures,
            rejections: r.rejections,
            rate: r.rate,
            std_error: r.std_error(),
            missing_rates: r.missing_rates.clone(),
            bandwidths: r.bandwidths.clone(),
        });
    }
    if rows.is_empty() {
        return Err(Usage::msg("no table cell matches --filter"));
    }
    match args.format {
        TableFormat::Json => write_json(
            args.output.as_deref(),
            &prov,
            &TableBody {
                table: number,
                level: args.level,
                cells: rows,
            },
        ),
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record([
                "label",
                "test",
                "reps",
                "failures",
                "rejections",
                "rate",
                "std_error",
                "missing_rates",
                "bandwidths",
            ])?;
            let join = |v: &[f64]| {
                v.iter()
                    .map(|x| format!("{x:.6}"))
                    .collect::<Vec<_>>()
                    .join(";")
            };
            for r in &rows {
                w.write_record([
                    r.label.clone(),
                    r.test.clone(),
                    r.reps.to_string(),
                    r.failures.to_string(),
                    r.rejections.to_string(),
                    format!("{:.6}", r.rate),
                    format!("{:.6}", r.std_error),
                    join(&r.missing_rates),
                    join(&r.bandwidths),
                ])?;
            }
            let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
            write_text(args.output.as_deref(), std::str::from_utf8(&bytes)?)
        }
    }
}

pub fn validate_cmd(args: DataArgs) -> Result<()> {
    let mut prov = Provenance::new("validate");
    let study = load(
        &args.data,
        args.interaction.as_deref(),
        args.lag_d,
        &mut prov,
    )?;
    let report = validate(&study);
    let severity = report.severity;
    write_json(args.output.as_deref(), &prov, &report)?;
    if severity == Severity::Error {
        bail!("validation found errors");
    }
    Ok(())
}
