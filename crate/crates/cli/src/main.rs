use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use kinecal_cli::commands::{self, Outcome};
use kinecal_cli::config::{parse_jacobian, parse_kind_list, parse_robust, RunConfig, SplitMode};

/// Kinematic self-calibration from chain closures.
///
/// Exit codes: 0 success, 1 usage or input error, 2 outputs written with
/// warnings. Log verbosity follows `RUST_LOG` (default `info`).
#[derive(Parser)]
#[command(name = "kinecal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic experiment from a scenario file.
    Simulate {
        /// Scenario file (TOML, or JSON by extension).
        #[arg(long, visible_alias = "config")]
        spec: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Calibrate the free parameters on the training split.
    Calibrate(RunArgs),
    /// Analyze the identification Jacobian at the given robot.
    Observability(RunArgs),
    /// Calibrate and compare against nominal parameters on held-out data.
    Evaluate(RunArgs),
    /// Calibrate every single kind, every pair and all kinds together.
    Campaign(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    robot: Option<PathBuf>,
    /// Repeat to concatenate several datasets.
    #[arg(long)]
    dataset: Vec<PathBuf>,
    /// Ground-truth robot for parameter errors.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Comma-separated closure kinds: sc, pl, so, ext.
    #[arg(long)]
    kinds: Option<String>,
    /// Free-parameter pattern such as `l1.*` or `head_cam.tx`; repeatable.
    #[arg(long)]
    mask: Vec<String>,
    /// Training fraction in (0, 1].
    #[arg(long)]
    split: Option<f64>,
    /// random or workspace.
    #[arg(long)]
    split_mode: Option<SplitMode>,
    /// Joint ordering records for the workspace split.
    #[arg(long)]
    split_joint: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// forward or central.
    #[arg(long)]
    jacobian: Option<String>,
    /// none or huber:DELTA.
    #[arg(long)]
    robust: Option<String>,
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Records per campaign.
    #[arg(long)]
    campaign_total: Option<usize>,
    /// Run campaigns one after another on a single thread.
    #[arg(long)]
    serial: bool,
}

impl RunArgs {
    fn into_config(self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(r) = self.robot {
            cfg.robot = Some(r);
        }
        if !self.dataset.is_empty() {
            cfg.dataset = self.dataset;
        }
        if let Some(t) = self.truth {
            cfg.truth = Some(t);
        }
        if let Some(k) = self.kinds {
            cfg.kinds = Some(parse_kind_list(&k)?);
        }
        if !self.mask.is_empty() {
            cfg.mask = Some(self.mask);
        }
        if let Some(s) = self.split {
            cfg.split = s;
        }
        if let Some(m) = self.split_mode {
            cfg.split_mode = m;
        }
        if let Some(j) = self.split_joint {
            cfg.split_joint = j;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = self.out {
            cfg.out = o;
        }
        if let Some(j) = self.jacobian {
            cfg.solve.jacobian_mode = parse_jacobian(&j)?;
        }
        if let Some(r) = self.robust {
            cfg.solve.robust_loss = parse_robust(&r)?;
        }
        if let Some(n) = self.max_iterations {
            cfg.solve.max_iterations = n;
        }
        if let Some(t) = self.campaign_total {
            cfg.campaign_total = Some(t);
        }
        if self.serial {
            cfg.parallel = false;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    Ok(match cli.command {
        Command::Simulate { spec, out } => {
            let (o, outcome) = commands::simulate(&spec, &out)?;
            for f in &o.files {
                println!("{}", f.display());
            }
            outcome
        }
        Command::Calibrate(a) => {
            let cfg = a.into_config()?;
            let (r, outcome) = commands::calibrate(&cfg)?;
            println!(
                "cost {:.6e} -> {:.6e}; report in {}",
                r.solver["initial_cost"].as_f64().unwrap_or(f64::NAN),
                r.solver["final_cost"].as_f64().unwrap_or(f64::NAN),
                cfg.out.join(commands::CALIBRATION_REPORT_FILE).display()
            );
            outcome
        }
        Command::Observability(a) => {
            let cfg = a.into_config()?;
            let (s, outcome) = commands::observability(&cfg)?;
            println!(
                "O1 {:.4e} O2 {:.4e} O3 {:.4e} O4 {:.4e}; {} unidentifiable",
                s.full.o1,
                s.full.o2,
                s.full.o3,
                s.full.o4,
                s.unidentifiable.len()
            );
            outcome
        }
        Command::Evaluate(a) => {
            let cfg = a.into_config()?;
            let (r, outcome) = commands::evaluate(&cfg)?;
            for (k, v) in &r.test_rms_reduction {
                println!(
                    "{}: held-out rms {:.4e} -> {:.4e} {} ({:.1}% lower)",
                    k.code(),
                    r.test.nominal.rms[k],
                    r.test.calibrated.rms[k],
                    k.unit(),
                    100.0 * v
                );
            }
            outcome
        }
        Command::Campaign(a) => {
            let cfg = a.into_config()?;
            let (r, outcome) = commands::campaign(&cfg)?;
            print!("{}", commands::campaign_csv(&r)?);
            outcome
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::Degraded(msg)) => {
            eprintln!("warning: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
