use std::io::{self, BufReader};
use std::net::TcpStream;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use diagon::experiment::{cmd_ablate, cmd_metrics, cmd_run, cmd_serve, ExperimentSpec, AXES};
use diagon::market::Mode;
use diagon::policy::external::{run_reference_agent, ReferenceBehaviour};

#[derive(Parser)]
#[command(name = "diagon", version, about = "Agent cognitive-labour market simulator")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct SpecArgs {
    /// Experiment spec (TOML). Defaults reproduce the baseline market.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds, overriding the spec.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = ["market", "autarky"])]
    mode: Option<String>,
    #[arg(long)]
    rounds: Option<u32>,
}

impl SpecArgs {
    fn load(&self) -> Result<ExperimentSpec, Box<dyn std::error::Error>> {
        let mut spec = match &self.config {
            Some(path) => ExperimentSpec::load(path)?,
            None => ExperimentSpec::default(),
        };
        if !self.seeds.is_empty() {
            spec.seeds = self.seeds.clone();
        }
        if let Some(out) = &self.out {
            spec.output_dir = out.clone();
        }
        match self.mode.as_deref() {
            Some("autarky") => spec.mode = Mode::Autarky,
            Some(_) => spec.mode = Mode::Market,
            None => {}
        }
        if let Some(r) = self.rounds {
            spec.config.rounds = r;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every seed of a spec and write logs, snapshots and metrics.
    Run(SpecArgs),
    /// Run the base spec and the variants of one axis on shared seeds.
    Ablate {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, value_parser = AXES)]
        axis: String,
    },
    /// Summarise transaction logs.
    Metrics {
        logs: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Serve the run to external agents over TCP.
    Serve {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, default_value = "127.0.0.1:7878")]
        endpoint: String,
    },
    /// Wire-protocol reference agent on stdio, or over TCP when --connect
    /// is given.
    #[command(hide = true)]
    ReferenceAgent {
        #[arg(long)]
        connect: Option<String>,
        #[arg(long, value_delimiter = ',')]
        agents: Vec<u32>,
        #[arg(long, default_value = "cooperative", value_parser = ["cooperative", "no-bid", "malformed", "silent"])]
        behaviour: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), Box<dyn std::error::Error>> {
    match cmd {
        Cmd::Run(args) => {
            let run = cmd_run(&args.load()?)?;
            for s in &run.seeds {
                println!("seed {} -> {}", s.seed, s.log_path.display());
            }
            let wealth = &run.pooled.scalars["mean_wealth"];
            println!("mean wealth {:.4} (cv {:.3}) over {} seeds", wealth.mean, wealth.cv, run.seeds.len());
        }
        Cmd::Ablate { spec, axis } => print!("{}", cmd_ablate(&spec.load()?, &axis)?.render()),
        Cmd::Metrics { logs, json } => {
            let out = cmd_metrics(&logs)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&out)?);
            } else {
                print!("{}", out.render());
            }
        }
        Cmd::Serve { spec, endpoint } => {
            let run = cmd_serve(&spec.load()?, &endpoint)?;
            println!("served run written to {}", run.dir.display());
        }
        Cmd::ReferenceAgent { connect, agents, behaviour } => {
            let behaviour = match behaviour.as_str() {
                "no-bid" => ReferenceBehaviour::NoBid,
                "malformed" => ReferenceBehaviour::Malformed,
                "silent" => ReferenceBehaviour::Silent,
                _ => ReferenceBehaviour::Cooperative,
            };
            let stats = match connect {
                Some(addr) => {
                    let stream = TcpStream::connect(addr)?;
                    stream.set_nodelay(true)?;
                    let mut writer = stream.try_clone()?;
                    serde_json::to_writer(&mut writer, &serde_json::json!({ "hello": { "agents": agents } }))?;
                    io::Write::write_all(&mut writer, b"\n")?;
                    run_reference_agent(BufReader::new(stream), writer, behaviour)?
                }
                None => run_reference_agent(io::stdin().lock(), io::stdout().lock(), behaviour)?,
            };
            eprintln!("reference agent: {} requests, {} queries", stats.requests, stats.queries_sent);
        }
    }
    Ok(())
}
