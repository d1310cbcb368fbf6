//! Run every stage from a config file and print the report.
//!
//! `cargo run --example pipeline -- configs/synthetic_quick.toml`

use advkit::harness::{emit_report, run_pipeline, ExperimentConfig, ReportFormat};

fn main() -> advkit::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/configs/synthetic_quick.toml").to_string());
    let mut config = ExperimentConfig::load(path.as_ref())?;
    config.out_dir = std::env::temp_dir().join(format!("advkit-example-{}", &config.hash()[..12]));
    let _ = std::fs::remove_dir_all(&config.out_dir);
    let out = run_pipeline(&config)?;
    print!("{}", emit_report(&[out.report], ReportFormat::Markdown)?);
    println!("artifacts in {}", config.out_dir.display());
    Ok(())
}
