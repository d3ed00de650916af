//! `gsnet`: synthetic data generation, training, evaluation, gradient
//! checking and the attention ablation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, Parser, Subcommand};

use gsnet_cli::config::{RunConfig, UsageError};
use gsnet_cli::{commands, CliError};

#[derive(Parser)]
#[command(name = "gsnet", version, about = "CNN classifier with global self-attention, on synthetic disc/cup images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset and split it into train/val/test.
    GenData(GenDataArgs),
    /// Train one variant and keep the best-validation checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Compare tape gradients with central differences on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Train all four variants over several seeds and tabulate test metrics.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct Common {
    /// Settings file with `key = value` lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory that receives every output.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct TrainingFlags {
    #[arg(long, default_value = "50")]
    epochs: String,
    #[arg(long, default_value = "0.005")]
    lr: String,
    #[arg(long, default_value = "16")]
    batch_size: String,
    /// Random rotation, scaling and flips on training images.
    #[arg(long, default_value = "true")]
    augment: String,
    /// Images are resized to this square size.
    #[arg(long, default_value = "64")]
    input_hw: String,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "7")]
    seed: String,
    #[arg(long, default_value = "200")]
    per_class: String,
    #[arg(long, default_value = "64")]
    image_hw: String,
    #[arg(long, default_value = "0.05")]
    noise_std: String,
    /// Train, validation and test fractions.
    #[arg(long, default_value = "0.49,0.21,0.30")]
    fractions: String,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory or its manifest.csv.
    #[arg(long)]
    data: Option<String>,
    /// baseline, cam_only, sam_only or full_gsam.
    #[arg(long, default_value = "full_gsam")]
    variant: String,
    #[arg(long, default_value = "7")]
    seed: String,
    #[command(flatten)]
    training: TrainingFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory or its manifest.csv.
    #[arg(long)]
    data: Option<String>,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: Option<String>,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "7")]
    seed: String,
    /// Maximum accepted relative error.
    #[arg(long, default_value = "1e-6")]
    tol: String,
    /// Elements checked per parameter; 0 checks every element.
    #[arg(long, default_value = "0")]
    samples: String,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory or its manifest.csv.
    #[arg(long)]
    data: Option<String>,
    #[arg(long, default_value = "7,8,9")]
    seeds: String,
    #[command(flatten)]
    training: TrainingFlags,
}

/// Library defaults, then the config file, then flags given on the command line.
fn resolve(m: &ArgMatches) -> Result<RunConfig, UsageError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = m.get_one::<PathBuf>("config") {
        cfg.apply_file(path)?;
    }
    for id in m.ids() {
        let id = id.as_str();
        // Flattened argument groups show up as ids too; they hold no string.
        let Ok(Some(v)) = m.try_get_one::<String>(id) else {
            continue;
        };
        if m.value_source(id) == Some(ValueSource::CommandLine) {
            cfg.set(id, v)?;
        }
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let result = resolve(sub).map_err(CliError::from).and_then(|cfg| match name {
        "gen-data" => commands::gen_data(&cfg),
        "train" => commands::train(&cfg),
        "eval" => commands::eval(&cfg),
        "gradcheck" => commands::gradcheck(&cfg),
        "ablate" => commands::ablate(&cfg),
        other => unreachable!("unhandled subcommand {other}"),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `gsnet {name} --help` for usage");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            // Library errors already print their source; skip repeated causes.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
