use std::process::ExitCode;

use clap::Parser;

mod cli;
mod commands;
mod parse;
mod provenance;

use cli::{Cli, Command};

/// An error in how the tool was invoked rather than in the computation.
#[derive(Debug)]
pub struct Usage(anyhow::Error);

impl Usage {
    pub fn wrap(e: anyhow::Error) -> anyhow::Error {
        anyhow::Error::new(Usage(e))
    }

    pub fn msg(m: impl std::fmt::Display) -> anyhow::Error {
        Self::wrap(anyhow::anyhow!("{m}"))
    }
}

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for Usage {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Anova(a) => commands::anova(a),
        Command::FitPropensity(a) => commands::fit_propensity_cmd(a),
        Command::Bandwidth(a) => commands::bandwidth_cmd(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Validate(a) => commands::validate_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
