use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lgcp_synth::pipeline::{self, Pipeline, PipelineConfig};
use lgcp_synth::{Error, Result};

#[derive(Parser)]
#[command(name = "lgcp-synth", version, about = "Synthetic point patterns from log-Gaussian Cox process fits")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: `toy` or `snow`.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Build the mesh and write it with the covariate rasters.
    Mesh,
    /// Fit the confidential pattern and store the chain.
    Fit,
    /// Generate synthetic patterns.
    Synth(Rows),
    /// Score disclosure risk.
    Risk(Rows),
    /// Score pMSE utility.
    Utility(Rows),
    /// Synthesise and score every grid row; writes the frontier.
    Sweep,
    /// Archive a swept row that clears both ceilings.
    Release {
        /// Grid row; defaults to the best-utility admissible row.
        #[arg(long)]
        row: Option<usize>,
    },
    /// Chain utilities.
    Chain {
        #[command(subcommand)]
        command: ChainCommand,
    },
}

#[derive(Args)]
struct Rows {
    /// Grid rows (0-based); all rows when omitted.
    #[arg(long = "row")]
    rows: Vec<usize>,
}

#[derive(Subcommand)]
enum ChainCommand {
    /// Write a stored chain as CSV.
    Export {
        chain: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
}

fn config(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = match (&g.config, &g.preset) {
        (Some(p), _) => PipelineConfig::load(p)?,
        (None, Some(name)) => PipelineConfig::preset(name)?,
        (None, None) => return Err(Error::Config("pass --config <json> or --preset <name>".into())),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Chain { command: ChainCommand::Export { chain, csv } } = &cli.command {
        return pipeline::cmd_chain_export(chain, csv);
    }
    let p = Pipeline::new(config(&cli.global)?)?;
    let out = &cli.global.out;
    match cli.command {
        Command::Mesh => {
            pipeline::cmd_mesh(&p, out)?;
            println!("mesh: {} vertices, hash {}", p.ctx.n(), p.ctx.mesh_hash());
        }
        Command::Fit => {
            let s = pipeline::cmd_fit(&p, out)?;
            for (j, b) in s.beta.iter().enumerate() {
                println!("beta_{j}: {:.4} ({:.4}, {:.4})", b.mean, b.lo, b.hi);
            }
            println!("rho: {:.2} ({:.2}, {:.2})", s.rho.mean, s.rho.lo, s.rho.hi);
            println!("sigma2: {:.4} ({:.4}, {:.4})", s.sigma2.mean, s.sigma2.lo, s.sigma2.hi);
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Synth(r) => {
            for path in pipeline::cmd_synth(&p, out, &r.rows)? {
                println!("{}", path.display());
            }
        }
        Command::Risk(r) => {
            for rep in pipeline::cmd_risk(&p, out, &r.rows)? {
                println!("{} {:?}: max risk {:e}", rep.mechanism, rep.parameter, rep.max_risk);
            }
        }
        Command::Utility(r) => {
            for rep in pipeline::cmd_utility(&p, out, &r.rows)? {
                println!("pMSE {:.6}", rep.pmse);
            }
        }
        Command::Sweep => {
            for r in pipeline::cmd_sweep(&p, out)? {
                match (r.max_risk, r.pmse) {
                    (Some(risk), Some(u)) => println!("{}: max risk {risk:e}, pMSE {u:.6}", r.key),
                    _ => println!("{}: failed: {}", r.key, r.error.unwrap_or_default()),
                }
            }
        }
        Command::Release { row } => {
            println!("{}", pipeline::cmd_release(&p, out, row)?.display());
        }
        Command::Chain { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
