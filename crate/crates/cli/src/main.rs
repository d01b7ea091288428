use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;

use chainforge::algorithms::{AlgoConfig, Algorithm};
use chainforge::envs::conformance::ConformanceProfile;
use chainforge_cli::commands::{self, ServedEnv};
use chainforge_cli::config::PolicyKind;
use chainforge_cli::{CliError, RunConfig};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "chainforge",
    version,
    about = "Multi-turn agent rollouts over pooled tool environments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Generic,
    Counter,
}

#[derive(Subcommand)]
enum Command {
    /// Run every chain of a config and write trajectories and stats.
    Rollout {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Use a remote chat-completions policy at this base URL.
        #[arg(long)]
        policy_endpoint: Option<String>,
        #[arg(long)]
        max_turns: Option<u32>,
    },
    /// Serve a built-in environment over HTTP until interrupted.
    ServeEnv {
        #[arg(long, default_value = "gridhouse")]
        env: ServedEnv,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long, default_value_t = 8000)]
        port: u16,
        #[arg(long)]
        fixtures: Option<PathBuf>,
    },
    /// Summarize a trajectory file; one curve row per concatenated batch.
    Stats {
        trajectories: PathBuf,
        /// Write the curve CSV here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compute per-token advantages for a trajectory file.
    Advantages {
        trajectories: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Run config supplying the algorithm settings and group size.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        algorithm: Option<String>,
        /// Chains expected per group; defaults to the config's value.
        #[arg(long)]
        n_chains: Option<usize>,
        /// JSONL with token-aligned values and logprobs per chain.
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
    /// Check an environment server against the wire protocol.
    Conformance {
        #[arg(long)]
        url: String,
        #[arg(long, value_enum, default_value = "generic")]
        profile: Profile,
    },
}

async fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Rollout {
            config,
            seed,
            output_dir,
            policy_endpoint,
            max_turns,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(d) = output_dir {
                cfg.output.dir = d;
            }
            if let Some(e) = policy_endpoint {
                cfg.policy.kind = PolicyKind::Remote;
                cfg.policy.endpoint = Some(e);
            }
            if let Some(t) = max_turns {
                cfg.rollout.max_turns = t;
            }
            cfg.validate()?;
            let report = commands::cmd_rollout(&cfg).await?;
            print!("{}", commands::format_stats(&report.stats));
            println!(
                "wrote {} trajectories to {}",
                report.batch.trajectories.len(),
                report.output_dir.join(&cfg.output.trajectories).display()
            );
            Ok(())
        }
        Command::ServeEnv {
            env,
            host,
            port,
            fixtures,
        } => {
            let server = commands::start_env_server(env, SocketAddr::new(host, port), fixtures).await?;
            println!("serving on {}", server.url());
            tokio::signal::ctrl_c()
                .await
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            server.shutdown().await;
            Ok(())
        }
        Command::Stats { trajectories, csv } => {
            let report = commands::cmd_stats(&trajectories)?;
            print!("{}", commands::format_stats(&report.stats));
            match csv {
                Some(path) => std::fs::write(&path, &report.csv)
                    .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?,
                None => print!("\n{}", report.csv),
            }
            Ok(())
        }
        Command::Advantages {
            trajectories,
            output,
            config,
            algorithm,
            n_chains,
            sidecar,
        } => {
            let (mut algo, mut n) = (AlgoConfig::default(), n_chains);
            if let Some(path) = config {
                let cfg = RunConfig::load(&path)?;
                algo = cfg.algorithm;
                n = n.or(Some(cfg.rollout.n_chains_per_query));
            }
            if let Some(name) = algorithm {
                algo.algorithm = name
                    .parse::<Algorithm>()
                    .map_err(|e| CliError::Config(format!("--algorithm: {e}")))?;
            }
            let report = commands::cmd_advantages(&trajectories, &algo, n, sidecar.as_deref())?;
            commands::write_advantages(&output, &report.records)?;
            println!("algorithm            {}", algo.algorithm);
            println!("trajectories         {}", report.records.len());
            println!("masked_mean          {:.6}", report.masked_mean);
            println!("masked_std           {:.6}", report.masked_std);
            if algo.algorithm.is_group_based() {
                let worst = report.group_sums.values().fold(0.0f64, |m, s| m.max(s.abs()));
                println!("max_abs_group_sum    {worst:.3e}");
            }
            if let Some(loss) = report.ppo_loss {
                println!("ppo_clip_loss        {loss:.6}");
            }
            println!("wrote {}", output.display());
            Ok(())
        }
        Command::Conformance { url, profile } => {
            let profile = match profile {
                Profile::Generic => ConformanceProfile::Generic,
                Profile::Counter => ConformanceProfile::Counter,
            };
            let report = commands::cmd_conformance(&url, profile).await?;
            print!("{report}");
            Ok(())
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn,chainforge::envs::http=info")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
