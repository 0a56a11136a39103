use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use podsr::config::ExperimentConfig;
use podsr::pipeline::{Method, Pipeline};

#[derive(Parser)]
#[command(
    name = "podsr",
    version,
    about = "POD-space diffusion super-resolution pipeline"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate advection-diffusion trajectories and write HR/LR stacks.
    GenData(Common),
    /// Fit the POD basis on the training snapshots.
    FitPod(Common),
    /// Train the diffusion denoiser (podiff or randorth).
    Train(Common),
    /// Draw ensembles for the evaluation cases.
    Sample(Common),
    /// Score a method against the test truth.
    Evaluate(Common),
    /// Produce a deterministic baseline (podproj or rbf).
    Baseline(Common),
    /// Aggregate metrics and export the variance spectrum.
    Report(Common),
    /// Every stage, every configured K, every method.
    Run(Common),
    /// Print the effective configuration as TOML.
    ShowConfig(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated evaluation case positions.
    #[arg(long, value_delimiter = ',')]
    cases: Option<Vec<usize>>,
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    /// Truncation level.
    #[arg(long)]
    k: Option<usize>,
    /// Ensemble size override.
    #[arg(long)]
    samples: Option<usize>,
    /// Sampler step override.
    #[arg(long)]
    steps: Option<usize>,
    /// Progress messages on stderr.
    #[arg(long, short)]
    verbose: bool,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: podsr::Error| e.to_string())
}

impl Common {
    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output = o.clone();
        }
        if let Some(m) = self.samples {
            cfg.diffusion.members = m;
        }
        if let Some(s) = self.steps {
            cfg.diffusion.steps = s;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (Command::GenData(c)
    | Command::FitPod(c)
    | Command::Train(c)
    | Command::Sample(c)
    | Command::Evaluate(c)
    | Command::Baseline(c)
    | Command::Report(c)
    | Command::Run(c)
    | Command::ShowConfig(c)) = &cli.cmd;
    let cfg = c.config()?;
    if let Command::ShowConfig(_) = cli.cmd {
        cfg.validate()?;
        print!("{}", cfg.to_toml_string()?);
        return Ok(());
    }
    let mut p = Pipeline::open(cfg)?.verbose(c.verbose);
    let k = match c.k {
        Some(k) => k,
        None if matches!(
            cli.cmd,
            Command::GenData(_) | Command::FitPod(_) | Command::Report(_) | Command::Run(_)
        ) =>
        {
            0
        }
        None => p
            .default_k()
            .context("resolving default K (run fit-pod first?)")?,
    };
    let cases = c.cases.as_deref();
    match cli.cmd {
        Command::GenData(_) => p.gen_data()?,
        Command::FitPod(_) => p.fit_pod()?,
        Command::Train(_) => p.train(c.method.unwrap_or(Method::Podiff), k)?,
        Command::Sample(_) => p.sample(c.method.unwrap_or(Method::Podiff), k, cases)?,
        Command::Baseline(_) => p.baseline(c.method.unwrap_or(Method::Podproj), k, cases)?,
        Command::Evaluate(_) => {
            let e = p.evaluate(c.method.unwrap_or(Method::Podiff), k)?;
            let r = &e.report;
            println!(
                "{}: rmse {:.6} mae {:.6} crps {:.6}",
                e.tag, r.rmse, r.mae, r.crps
            );
            if let Some(m) = r.mace {
                println!("{}: mace {:.6}", e.tag, m);
            }
        }
        Command::Report(_) => p.report()?,
        Command::Run(_) => p.run_all()?,
        Command::ShowConfig(_) => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .chain()
                .find_map(|c| c.downcast_ref::<podsr::Error>())
                .map_or(1, podsr::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
