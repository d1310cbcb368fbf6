//! Stage runner: train → accuracy → candidates → attack → attack metrics →
//! defense → defense metrics, persisting artifacts as it goes.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;

use super::config::ExperimentConfig;
use super::container::{
    load_adversarial_set, load_checkpoint, save_adversarial_set, save_checkpoint, write_atomic,
};
use super::datasets::load_dataset;
use super::report::{emit_report, ReportFormat, RunReport};
use crate::attacks::{craft_adversarial_set, select_candidates, AdversarialSet};
use crate::defenses::{defend, train};
use crate::error::{Error, Result};
use crate::metrics::{attack_report, defense_report, AttackReport, DefenseReport};
use crate::models::{accuracy, build_model, Model};
use crate::numerics::LabeledBatch;

pub const RAW_CHECKPOINT: &str = "raw_model.ckpt";
pub const DEFENDED_CHECKPOINT: &str = "defended_model.ckpt";
pub const ADVERSARIAL_SET: &str = "adversarial_set.bin";
pub const RUN_REPORT: &str = "run_report.json";
pub const REPORT_MD: &str = "report.md";
pub const REPORT_CSV: &str = "report.csv";
pub const CONFIG_COPY: &str = "config.toml";
pub const FAILURE: &str = "failure.json";
const LOCK: &str = ".lock";

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK);
        OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::input(format!(
                    "{} is locked by another run (remove {} if it is stale)",
                    dir.display(),
                    path.display()
                ))
            } else {
                Error::io(&path, e)
            }
        })?;
        Ok(Self { path })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// One experiment bound to its output directory.
pub struct Run {
    pub config: ExperimentConfig,
    pub hash: String,
    pub dir: PathBuf,
    pub stage_times: BTreeMap<String, f64>,
}

impl Run {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            hash: config.hash(),
            dir: config.out_dir.clone(),
            config,
            stage_times: BTreeMap::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Runs `f` as a named stage: wall time is logged and recorded, errors
    /// are wrapped with the stage name and noted in `failure.json`.
    pub fn stage<T>(&mut self, name: &'static str, f: impl FnOnce(&Self) -> Result<T>) -> Result<T> {
        let started = Instant::now();
        let out = f(self);
        let secs = started.elapsed().as_secs_f64();
        self.stage_times.insert(name.to_string(), secs);
        match out {
            Ok(v) => {
                info!("stage {name}: {secs:.3}s");
                Ok(v)
            }
            Err(e) => {
                let note = serde_json::json!({
                    "stage": name,
                    "error": e.to_string(),
                    "config_hash": self.hash,
                });
                let _ = write_atomic(&self.path(FAILURE), note.to_string().as_bytes());
                Err(Error::Stage {
                    stage: name,
                    source: Box::new(e),
                })
            }
        }
    }

    pub fn load_data(&mut self) -> Result<(LabeledBatch, LabeledBatch)> {
        self.stage("load_dataset", |r| load_dataset(&r.config.dataset, r.config.data_seed()))
    }

    pub fn write_config(&self) -> Result<()> {
        write_atomic(&self.path(CONFIG_COPY), self.config.to_toml_string()?.as_bytes())
    }

    pub fn train(&mut self, data: &LabeledBatch) -> Result<Model> {
        let model = self.stage("train", |r| {
            let init = build_model(&r.config.model_config(data.image_shape(), data.num_classes()))?;
            let outcome = train(&init, data, &r.config.train_config())?;
            save_checkpoint(&outcome.model, &r.hash, &r.path(RAW_CHECKPOINT))?;
            Ok(outcome.model)
        })?;
        Ok(model)
    }

    pub fn load_raw(&self) -> Result<Model> {
        Ok(load_checkpoint(&self.path(RAW_CHECKPOINT), Some(&self.hash))?.0)
    }

    pub fn load_defended(&self) -> Result<Model> {
        Ok(load_checkpoint(&self.path(DEFENDED_CHECKPOINT), Some(&self.hash))?.0)
    }

    pub fn load_adversarial(&self) -> Result<AdversarialSet> {
        load_adversarial_set(&self.path(ADVERSARIAL_SET), Some(&self.hash))
    }

    pub fn attack(&mut self, raw: &Model, test: &LabeledBatch) -> Result<AdversarialSet> {
        let candidates = self.stage("select_candidates", |r| {
            select_candidates(raw, test, r.config.max_count, r.config.candidate_seed())
        })?;
        self.stage("attack", |r| {
            let set = craft_adversarial_set(raw, &candidates, &r.config.attack_config())?;
            save_adversarial_set(&set, &r.hash, &r.path(ADVERSARIAL_SET))?;
            Ok(set)
        })
    }

    pub fn attack_metrics(&mut self, raw: &Model, set: &AdversarialSet) -> Result<AttackReport> {
        self.stage("attack_metrics", |r| attack_report(set, raw, &r.config.blur))
    }

    pub fn defend(&mut self, raw: &Model, train_data: &LabeledBatch) -> Result<(Model, f64)> {
        self.stage("defense", |r| {
            let outcome = defend(raw, train_data, &r.config.defense_config())?;
            save_checkpoint(&outcome.model, &r.hash, &r.path(DEFENDED_CHECKPOINT))?;
            Ok((outcome.model, outcome.wall_time))
        })
    }

    pub fn defense_metrics(&mut self, raw: &Model, defended: &Model, test: &LabeledBatch) -> Result<DefenseReport> {
        self.stage("defense_metrics", |_| defense_report(raw, defended, test))
    }

    pub fn report(
        &self,
        train_size: usize,
        test_size: usize,
        attack: AttackReport,
        defense: Option<DefenseReport>,
    ) -> RunReport {
        RunReport {
            name: self
                .dir
                .file_name()
                .map_or_else(|| "run".to_string(), |n| n.to_string_lossy().into_owned()),
            config_hash: self.hash.clone(),
            seed: self.config.seed,
            train_size,
            test_size,
            candidates: attack.records,
            attack,
            defense,
            stage_times: self.stage_times.clone(),
        }
    }

    /// Writes `run_report.json`, `report.md` and `report.csv`.
    pub fn write_report(&self, report: &RunReport) -> Result<()> {
        let json = serde_json::to_vec_pretty(report).map_err(|e| Error::internal(e.to_string()))?;
        write_atomic(&self.path(RUN_REPORT), &json)?;
        let runs = std::slice::from_ref(report);
        write_atomic(&self.path(REPORT_MD), emit_report(runs, ReportFormat::Markdown)?.as_bytes())?;
        write_atomic(&self.path(REPORT_CSV), emit_report(runs, ReportFormat::Csv)?.as_bytes())
    }
}

/// Paths of everything a finished pipeline run persisted.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub raw_checkpoint: PathBuf,
    pub defended_checkpoint: PathBuf,
    pub adversarial_set: PathBuf,
    pub run_report: PathBuf,
    pub report_md: PathBuf,
    pub report_csv: PathBuf,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: RunReport,
    pub artifacts: Artifacts,
}

/// Runs `f` on a rayon pool with `workers` threads (0 keeps the global
/// pool).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::internal(e.to_string()))?;
    Ok(pool.install(f))
}

fn run_stages(run: &mut Run) -> Result<RunReport> {
    let (train_data, test) = run.load_data()?;
    let raw = run.train(&train_data)?;
    run.stage("accuracy_raw", |_| accuracy(&raw, &test))?;
    let set = run.attack(&raw, &test)?;
    let attack = run.attack_metrics(&raw, &set)?;
    let (defended, train_time) = run.defend(&raw, &train_data)?;
    let mut defense = run.defense_metrics(&raw, &defended, &test)?;
    defense.train_time = Some(train_time);
    let report = run.report(train_data.len(), test.len(), attack, Some(defense));
    run.write_report(&report)?;
    Ok(report)
}

/// Runs every stage end to end in `config.out_dir`.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<PipelineOutput> {
    let mut run = Run::new(config.clone())?;
    let _lock = OutputLock::acquire(&run.dir)?;
    let _ = fs::remove_file(run.path(FAILURE));
    run.write_config()?;
    info!("pipeline {} in {}", run.hash, run.dir.display());
    let report = with_workers(config.workers, || run_stages(&mut run))??;
    Ok(PipelineOutput {
        report,
        artifacts: Artifacts {
            raw_checkpoint: run.path(RAW_CHECKPOINT),
            defended_checkpoint: run.path(DEFENDED_CHECKPOINT),
            adversarial_set: run.path(ADVERSARIAL_SET),
            run_report: run.path(RUN_REPORT),
            report_md: run.path(REPORT_MD),
            report_csv: run.path(REPORT_CSV),
        },
    })
}

/// Reads the `run_report.json` of each run directory.
pub fn collect_reports(dirs: &[PathBuf]) -> Result<Vec<RunReport>> {
    dirs.iter()
        .map(|d| {
            let path = d.join(RUN_REPORT);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            serde_json::from_slice(&bytes)
                .map_err(|e| Error::format(path.display().to_string(), e.column() as u64, e.to_string()))
        })
        .collect()
}
