//! Run every stage on a config and print the final report. Defaults to the
//! seconds-scale smoke config in a temporary work directory.
//!
//!     cargo run --example pipeline -- configs/toy.toml

use std::path::PathBuf;

use odgen::pipeline::{Pipeline, PipelineConfig};

fn main() -> odgen::Result<()> {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..");
    let (config, overrides) = match std::env::args().nth(1) {
        Some(path) => (PathBuf::from(path), Vec::new()),
        None => {
            let dir = std::env::temp_dir().join("odgen-example-pipeline");
            (root.join("configs/smoke.toml"), vec![format!("work_dir={}", dir.display())])
        }
    };
    let pipeline = Pipeline::new(PipelineConfig::load(&config, &overrides)?);
    for (stage, outcome) in pipeline.run_all()? {
        println!("{stage:>14}: {outcome:?}");
    }
    let report = pipeline.final_report()?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
