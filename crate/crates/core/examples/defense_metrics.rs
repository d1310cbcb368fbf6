//! CAV, CRR, CSR, CCV and COS between a raw model and a PAT-retrained copy.

use advkit::attacks::AttackConfig;
use advkit::defenses::{pat_train, train, PatStyle, TrainConfig, TrainMode};
use advkit::harness::datasets::synthetic;
use advkit::metrics::defense_report;
use advkit::models::{build_model, Architecture, ModelConfig};

fn main() -> advkit::Result<()> {
    let (train_data, test) = synthetic(4, 400, 200, [1, 8, 8], 0.5, 1)?;
    let init = build_model(&ModelConfig::new(Architecture::Convnet, [1, 8, 8], 4).with_seed(2))?;
    let raw = train(&init, &train_data, &TrainConfig::standard(6, 16, 0.1).with_seed(3))?.model;
    let config = TrainConfig::standard(3, 16, 0.05)
        .with_seed(4)
        .with_defense(TrainMode::Pat, AttackConfig::pgd(0.2, 0.08, 3).with_random_start(true).with_seed(5))
        .with_pat_style(PatStyle::PerBatch);
    let defended = pat_train(&raw, &train_data, &config)?.model;
    let r = defense_report(&raw, &defended, &test)?;
    println!(
        "acc {:.3} -> {:.3}, CAV {:+.2}%, CRR {:.3}, CSR {:.3}, CCV {:?}, COS {:?}",
        r.acc_raw,
        r.acc_defended,
        100.0 * r.cav,
        r.crr,
        r.csr,
        r.ccv,
        r.cos
    );
    Ok(())
}
