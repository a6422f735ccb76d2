use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use odgen::pipeline::{Pipeline, PipelineConfig, Stage, StageOutcome};

/// Run one stage of the dataset synthesis pipeline.
#[derive(Parser, Debug)]
#[command(name = "odgen", version)]
struct Cli {
    /// finetune | pool | train-control | fit-stats | synthesize | filter |
    /// export | eval | all
    stage: String,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted `key=value`, repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn run(cli: &Cli) -> odgen::Result<()> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let config = PipelineConfig::load(&cli.config, &overrides)?;
    let pipeline = Pipeline::new(config);
    let stages: Vec<Stage> = if cli.stage == "all" {
        Stage::ALL.to_vec()
    } else {
        vec![cli.stage.parse()?]
    };
    for stage in stages {
        let line = match pipeline.run_stage(stage)? {
            StageOutcome::Ran { seconds } => serde_json::json!({"stage": stage.name(), "status": "ran", "seconds": seconds}),
            StageOutcome::UpToDate => serde_json::json!({"stage": stage.name(), "status": "up-to-date"}),
        };
        println!("{line}");
        if stage == Stage::Eval {
            println!("{}", serde_json::to_string(&pipeline.final_report()?)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_precondition() { 2 } else { 1 })
        }
    }
}
