use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use simhub_campaign::{expand, predict_makespan, run_campaign, CampaignSpec};
use simhub_core::client::EvalApiClient;

/// Parameter-sweep campaigns against an experiment service.
#[derive(Parser, Debug)]
#[command(name = "campaign", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every point of a campaign and report the makespan.
    Run {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        api: String,
        #[arg(long)]
        token: Option<String>,
        /// Where to write the JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the analytic makespan model.
    Predict {
        #[arg(long)]
        n: u64,
        #[arg(long = "per-run-s")]
        per_run_s: f64,
        #[arg(long)]
        parallelism: u64,
        #[arg(long, default_value_t = 1.0)]
        slowdown: f64,
        #[arg(long, default_value_t = 1.0)]
        efficiency: f64,
    },
    /// List the points of a campaign without running them.
    Expand {
        #[arg(long)]
        spec: PathBuf,
        /// Validate each point against the system published here.
        #[arg(long)]
        api: Option<String>,
        #[arg(long)]
        token: Option<String>,
    },
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run { spec, api, token, out } => {
            let spec = CampaignSpec::load(&spec)?;
            let client = EvalApiClient::new(&api, token).context("invalid --api url")?;
            let report = run_campaign(&client, &spec).await?;
            if let Some(out) = out {
                std::fs::write(&out, serde_json::to_vec_pretty(&report)?)
                    .with_context(|| format!("writing {}", out.display()))?;
            }
            print!("{}", report.summary_table());
        }
        Command::Predict {
            n,
            per_run_s,
            parallelism,
            slowdown,
            efficiency,
        } => {
            let secs = predict_makespan(n, per_run_s, parallelism, slowdown, efficiency)?;
            println!("{secs}");
        }
        Command::Expand { spec, api, token } => {
            let spec = CampaignSpec::load(&spec)?;
            let iface = match api {
                Some(api) => {
                    let client = EvalApiClient::new(&api, token).context("invalid --api url")?;
                    let systems = client.list_systems().await?;
                    let iface = systems
                        .iter()
                        .filter_map(|s| s.interface())
                        .find(|i| i.id == spec.system)
                        .with_context(|| format!("system {} is not offered", spec.system))?;
                    Some(iface)
                }
                None => None,
            };
            for p in expand(&spec, iface.as_ref())? {
                println!("{}", serde_json::to_string(&p)?);
            }
        }
    }
    Ok(())
}
