use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use advkit::harness::pipeline::{with_workers, OutputLock, Run};
use advkit::harness::{collect_reports, emit_report, run_pipeline, ExperimentConfig, ReportFormat};
use advkit::models::accuracy;
use advkit::{Error, Result};

/// Adversarial attacks, adversarial training and robustness metrics.
#[derive(Parser)]
#[command(name = "advkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the raw model and write its checkpoint.
    Train(Common),
    /// Attack the raw model and write the adversarial set.
    Attack(Common),
    /// Run the configured defense on the raw model.
    Defend(Common),
    /// Compute attack and defense metrics from persisted artifacts.
    Evaluate(Common),
    /// Run every stage end to end.
    Pipeline(Common),
    /// Combine run reports into one table, one column per run.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rayon worker threads (0 = all cores). Does not change results.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    architecture: Option<String>,
    #[arg(long)]
    width_factor: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    max_count: Option<usize>,
    /// Defense mode: standard, nat or pat.
    #[arg(long)]
    defense: Option<String>,
    /// Override any config key, e.g. `--set attack.random_start=true`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut c = ExperimentConfig::load(&self.config)?;
        let mut sets: Vec<String> = Vec::new();
        let mut push = |key: &str, v: Option<String>| {
            if let Some(v) = v {
                sets.push(format!("{key}={v}"));
            }
        };
        push("model.architecture", self.architecture.as_ref().map(|v| format!("\"{v}\"")));
        push("model.width_factor", self.width_factor.map(|v| v.to_string()));
        push("train.epochs", self.epochs.map(|v| v.to_string()));
        push("attack.epsilon", self.epsilon.map(|v| format!("{v:?}")));
        push("attack.step_size", self.step_size.map(|v| format!("{v:?}")));
        push("attack.steps", self.steps.map(|v| v.to_string()));
        push("max_count", self.max_count.map(|v| v.to_string()));
        push("defense.mode", self.defense.as_ref().map(|v| format!("\"{v}\"")));
        for s in sets.iter().chain(&self.overrides) {
            c.set(s)?;
        }
        if let Some(seed) = self.seed {
            c.seed = seed;
        }
        if let Some(out) = &self.out {
            c.out_dir = out.clone();
        }
        if let Some(w) = self.workers {
            c.workers = w;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories, each holding a run_report.json.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// csv or markdown.
    #[arg(long, default_value = "markdown")]
    format: String,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn staged(common: &Common, body: impl FnOnce(&mut Run) -> Result<()> + Send) -> Result<()> {
    let config = common.load()?;
    let workers = config.workers;
    let mut run = Run::new(config)?;
    let _lock = OutputLock::acquire(&run.dir)?;
    run.write_config()?;
    with_workers(workers, || body(&mut run))?
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train(c) => staged(&c, |run| {
            let (train, test) = run.load_data()?;
            let model = run.train(&train)?;
            println!(
                "raw model: {} parameters, train accuracy {:.4}, test accuracy {:.4}",
                model.param_count(),
                accuracy(&model, &train)?,
                accuracy(&model, &test)?
            );
            Ok(())
        }),
        Command::Attack(c) => staged(&c, |run| {
            let raw = run.load_raw()?;
            let (_, test) = run.load_data()?;
            let set = run.attack(&raw, &test)?;
            let report = run.attack_metrics(&raw, &set)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Error::Internal(e.to_string()))?);
            Ok(())
        }),
        Command::Defend(c) => staged(&c, |run| {
            let raw = run.load_raw()?;
            let (train, test) = run.load_data()?;
            let (defended, secs) = run.defend(&raw, &train)?;
            println!(
                "defended model: test accuracy {:.4} (raw {:.4}), {secs:.1}s",
                accuracy(&defended, &test)?,
                accuracy(&raw, &test)?
            );
            Ok(())
        }),
        Command::Evaluate(c) => staged(&c, |run| {
            let raw = run.load_raw()?;
            let set = run.load_adversarial()?;
            let (train, test) = run.load_data()?;
            let attack = run.attack_metrics(&raw, &set)?;
            let defense = match run.load_defended() {
                Ok(defended) => Some(run.defense_metrics(&raw, &defended, &test)?),
                Err(Error::Io { .. }) => None,
                Err(e) => return Err(e),
            };
            let report = run.report(train.len(), test.len(), attack, defense);
            run.write_report(&report)?;
            print!("{}", emit_report(&[report], ReportFormat::Markdown)?);
            Ok(())
        }),
        Command::Pipeline(c) => {
            let out = run_pipeline(&c.load()?)?;
            print!("{}", emit_report(&[out.report], ReportFormat::Markdown)?);
            println!("artifacts in {}", out.artifacts.run_report.parent().unwrap_or(&out.artifacts.run_report).display());
            Ok(())
        }
        Command::Report(r) => {
            let format: ReportFormat = r.format.parse()?;
            let text = emit_report(&collect_reports(&r.runs)?, format)?;
            match r.out {
                Some(path) => advkit::harness::container::write_atomic(&path, text.as_bytes()),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
