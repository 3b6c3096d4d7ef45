use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

#[derive(Debug, Parser)]
#[command(
    name = "elanova",
    version,
    about = "Compare treatments in repeated-measures data with dropout, by empirical likelihood"
)]
pub struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Test equality of covariate effects, interaction effects or baseline time curves.
    Anova(AnovaArgs),
    /// Fit and compare dropout propensity models per treatment.
    FitPropensity(PropensityArgs),
    /// Cross-validated bandwidth per treatment.
    Bandwidth(BandwidthArgs),
    /// Monte Carlo size and power tables, or a synthetic example dataset.
    Simulate(SimulateArgs),
    /// Missing rates and identifiability checks.
    Validate(DataArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hypothesis {
    Beta,
    Gamma,
    Interaction,
    G,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weight {
    Uniform,
    Kde,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Long-format CSV: treatment, subject, time, observed, y, x1..xp.
    #[arg(long)]
    pub data: PathBuf,

    /// Interaction rule: `none`, `x<c>*t` or `t*(x<c>-<s>)^2`.
    #[arg(long)]
    pub interaction: Option<String>,

    /// Dropout lag `d` of the missing-at-random assumption.
    #[arg(long)]
    pub lag_d: Option<usize>,

    /// Report path; standard output when absent.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

/// Options that may also come from a JSON config file; flags win.
#[derive(Debug, Args, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct AnovaOptions {
    #[arg(long, value_enum)]
    pub hypothesis: Option<Hypothesis>,

    /// Treatment ids to compare, e.g. `1,2,3`; all treatments when absent.
    #[arg(long, value_delimiter = ',')]
    pub groups: Option<Vec<i64>>,

    /// Treatment id for `--hypothesis interaction`; every treatment when absent.
    #[arg(long)]
    pub treatment: Option<i64>,

    /// Bootstrap replicates for the time-curve test; asymptotic normal calibration when absent.
    #[arg(long)]
    pub bootstrap: Option<usize>,

    /// Wild multiplier law: mammen, rademacher or normal.
    #[arg(long)]
    pub wild: Option<String>,

    #[arg(long)]
    pub seed: Option<u64>,

    /// Integration weight of the time-curve statistic.
    #[arg(long, value_enum)]
    pub weight: Option<Weight>,

    /// Bandwidth: `cv` (default), `rot`, or a positive number applied to every treatment.
    #[arg(long)]
    pub bandwidth: Option<String>,

    /// Propensity feature rule, e.g. `1+x1`, `x1+dy`, `M1`, `M2`, `M3`, `intercept`.
    #[arg(long)]
    pub propensity: Option<String>,

    /// Write the estimated time curves to this CSV.
    #[arg(long)]
    pub curves: Option<PathBuf>,

    /// Extra significance levels for `reject_at`.
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<f64>>,

    #[arg(skip)]
    pub interaction: Option<String>,

    #[arg(skip)]
    pub lag_d: Option<usize>,
}

impl AnovaOptions {
    /// Fills every unset field from `other`.
    pub fn merge(mut self, other: AnovaOptions) -> AnovaOptions {
        macro_rules! fill {
            ($($f:ident),*) => { $( if self.$f.is_none() { self.$f = other.$f; } )* };
        }
        fill!(
            hypothesis,
            groups,
            treatment,
            bootstrap,
            wild,
            seed,
            weight,
            bandwidth,
            propensity,
            curves,
            levels,
            interaction,
            lag_d
        );
        self
    }
}

#[derive(Debug, Args)]
pub struct AnovaArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[command(flatten)]
    pub opts: AnovaOptions,

    /// JSON file with any of the options above (kebab-case keys).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PropensityArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Comma-separated feature rules to compare.
    #[arg(long, value_delimiter = ',', default_value = "1+x1,M1,M2,M3")]
    pub models: Vec<String>,
}

#[derive(Debug, Args)]
pub struct BandwidthArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Propensity rule used for the weights of the score.
    #[arg(long)]
    pub propensity: Option<String>,

    /// Candidate bandwidths; a log grid scaled to the data when absent.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Table to reproduce (1 to 5).
    #[arg(long, required_unless_present = "example_data")]
    pub table: Option<u8>,

    #[arg(long, default_value_t = 500)]
    pub reps: usize,

    /// Bootstrap replicates inside each outer replicate (tables 4 and 5).
    #[arg(long, default_value_t = 100)]
    pub boot_reps: usize,

    #[arg(long, default_value_t = 1)]
    pub seed: u64,

    #[arg(long, default_value_t = 0.05)]
    pub level: f64,

    /// Only run cells whose label contains this string.
    #[arg(long)]
    pub filter: Option<String>,

    #[arg(long, value_enum, default_value_t = TableFormat::Json)]
    pub format: TableFormat,

    /// Write a four-arm synthetic dataset (three covariates, dropout) instead of a table.
    #[arg(long, conflicts_with = "table")]
    pub example_data: bool,

    /// Subjects per arm for `--example-data`.
    #[arg(long, default_value_t = 80)]
    pub subjects: usize,

    /// Visits per subject for `--example-data`.
    #[arg(long, default_value_t = 6)]
    pub visits: usize,

    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TableFormat {
    Json,
    Csv,
}
