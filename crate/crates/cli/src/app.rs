//! Command-line parsing and dispatch.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ensemble_control::sde::Scheme;
use ensemble_control::{builtin_example, PRESET_NAMES};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::{pipeline, verify};

#[derive(Debug, Parser)]
#[command(
    name = "ensemble",
    version,
    about = "Minimum-norm open-loop control of parameterized linear stochastic ensembles"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Discretize, factorize and write the control.
    Synthesize(Common),
    /// Simulate trials under a synthesized (or given) control.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Control file written by `synthesize`; synthesized afresh when absent.
        #[arg(long)]
        control: Option<PathBuf>,
    },
    /// Run the full pipeline for a preset and check it against theory.
    Verify {
        /// Preset name (alternative to --preset).
        #[arg(value_name = "PRESET")]
        name: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Built-in example systems.
    Example {
        #[command(subcommand)]
        action: ExampleAction,
    },
}

#[derive(Debug, Subcommand)]
pub enum ExampleAction {
    /// List preset names and descriptions.
    List,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub scheme: Option<Scheme>,
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long)]
    pub q: Option<usize>,
    #[arg(long)]
    pub max_condition: Option<f64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Skip statistics (allows a single trial).
    #[arg(long)]
    pub no_stats: bool,
}

impl Common {
    /// Base configuration from `--config` or `--preset`, with flags applied.
    pub fn to_config(&self, positional_preset: Option<&str>) -> Result<RunConfig, CliError> {
        let mut cfg = match (&self.config, self.preset.as_deref().or(positional_preset)) {
            (Some(path), None) => RunConfig::load(path)?,
            (None, Some(name)) => RunConfig::preset(name),
            (Some(_), Some(_)) => {
                return Err(CliError::Config(
                    "give either a preset or --config, not both".into(),
                ))
            }
            (None, None) => return Err(CliError::Config("a preset or --config is required".into())),
        };
        cfg.check_preset()?;
        if let Some(out) = &self.out {
            cfg.outputs.directory = out.clone();
        }
        let sim = &mut cfg.simulation;
        sim.trials = self.trials.or(sim.trials);
        sim.seed = self.seed.or(sim.seed);
        sim.scheme = self.scheme.or(sim.scheme);
        sim.h = self.h.or(sim.h);
        if self.no_stats {
            sim.stats = Some(false);
        }
        cfg.synthesis.q = self.q.or(cfg.synthesis.q);
        cfg.synthesis.max_condition = self.max_condition.or(cfg.synthesis.max_condition);
        Ok(cfg)
    }

    fn apply_threads(&self) {
        if let Some(n) = self.threads {
            // A second call in the same process keeps the first pool.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
}

/// Run the command line, printing results to stdout and errors to stderr.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            e.exit_code()
        }
    }
}

pub fn execute(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Synthesize(common) => {
            common.apply_threads();
            let out = pipeline::cmd_synthesize(&common.to_config(None)?)?;
            let r = &out.results;
            println!(
                "q = {} (numerical rank {}), s1/s_mq = {}, residual |Wg - xi| = {}",
                r.q.unwrap_or(0),
                r.numerical_rank.unwrap_or(0),
                r.condition_ratio.map_or("-".into(), crate::output::fmt_f64),
                r.residual.map_or("-".into(), crate::output::fmt_f64),
            );
            if let Some(rq) = r.reported_q {
                println!("reported q for this example: {rq} (select it with --q {rq})");
            }
            println!("wrote {}", out.resolved.out_dir().display());
        }
        Command::Simulate { common, control } => {
            common.apply_threads();
            let out = pipeline::cmd_simulate(&common.to_config(None)?, control.as_deref())?;
            if let Some(st) = &out.stats {
                println!(
                    "J1 = {}, J2_emp = {} (+/- {}), J2_theory = {}",
                    crate::output::fmt_f64(st.j1),
                    crate::output::fmt_f64(st.j2_empirical),
                    crate::output::fmt_f64(st.j2_se),
                    crate::output::fmt_f64(st.j2_theory)
                );
            }
            println!("wrote {}", out.resolved.out_dir().display());
        }
        Command::Verify { name, common } => {
            common.apply_threads();
            let out = verify::cmd_verify(&common.to_config(name.as_deref())?)?;
            for c in &out.report.checks {
                println!("{c}");
            }
            if !out.report.all_passed() {
                return Err(CliError::VerificationFailed {
                    failed: out.report.failures(),
                    total: out.report.checks.len(),
                });
            }
        }
        Command::Example {
            action: ExampleAction::List,
        } => {
            for name in PRESET_NAMES {
                let p = builtin_example(name)?;
                println!("{name:20} {}", p.description);
            }
        }
    }
    Ok(())
}
