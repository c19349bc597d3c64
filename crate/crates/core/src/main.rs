use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mblip::app::{self, Overrides, RunConfig, ToySize, MT_ENDPOINT_ENV};

#[derive(Parser)]
#[command(
    name = "mblip",
    version,
    about = "Multilingual re-alignment of a toy vision-language model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the multilingual instruction mix and its manifest.
    Forge(Common),
    /// Run the warm-up and re-alignment stages.
    Train(Common),
    /// Decode predictions for every configured eval dataset.
    Generate(Common),
    /// Score predictions and write per-language reports.
    Evaluate(Common),
    /// forge, train, generate and evaluate in sequence.
    Pipeline(Common),
    /// Write toy corpora, gold files and a run config.
    ToyData {
        #[arg(long, default_value = "toy")]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = ToySize::default().scenes)]
        scenes: usize,
        #[arg(long, default_value_t = ToySize::default().eval_per_language)]
        eval_per_language: usize,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Ablation preset name for `train`.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, env = MT_ENDPOINT_ENV)]
    mt_endpoint: Option<String>,
    /// Use the offline tagging translator instead of an MT service.
    #[arg(long)]
    mock_mt: bool,
    /// Also emit per-language bar charts.
    #[arg(long)]
    plot: bool,
}

impl Common {
    fn config(&self) -> mblip::Result<RunConfig> {
        RunConfig::load(&self.config)?.resolve(&Overrides {
            seed: self.seed,
            output: self.output.clone(),
            preset: self.preset.clone(),
            mt_endpoint: self.mt_endpoint.clone(),
            mock_mt: self.mock_mt,
            plot: self.plot,
        })
    }
}

fn run(cli: Cli) -> mblip::Result<()> {
    match cli.command {
        Command::Forge(c) => {
            let out = app::cmd_forge(&c.config()?)?;
            println!("forged {} examples", out.manifest.total);
        }
        Command::Train(c) => {
            for o in app::cmd_train(&c.config()?)? {
                if let (Some(a), Some(b)) = (o.initial_loss(), o.final_loss()) {
                    println!("{} steps: loss {a:.4} -> {b:.4}", o.metrics.len());
                }
            }
        }
        Command::Generate(c) => app::cmd_generate(&c.config()?)?,
        Command::Evaluate(c) => {
            for r in app::cmd_evaluate(&c.config()?)? {
                print!("{}", r.to_table());
            }
        }
        Command::Pipeline(c) => {
            let cfg = c.config()?;
            app::cmd_forge(&cfg)?;
            app::cmd_train(&cfg)?;
            app::cmd_generate(&cfg)?;
            for r in app::cmd_evaluate(&cfg)? {
                print!("{}", r.to_table());
            }
        }
        Command::ToyData {
            output,
            seed,
            scenes,
            eval_per_language,
        } => {
            let size = ToySize {
                scenes,
                eval_per_language,
            };
            let path = app::write_toy_workspace(&output, size, seed)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
