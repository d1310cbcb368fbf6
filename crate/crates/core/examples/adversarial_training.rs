//! Compare robust accuracy of a standard model with NAT and PAT retraining.

use advkit::attacks::{robust_accuracy, AttackConfig};
use advkit::defenses::{defend, train, PatStyle, TrainConfig, TrainMode};
use advkit::harness::datasets::synthetic;
use advkit::models::{accuracy, build_model, Architecture, ModelConfig};

fn main() -> advkit::Result<()> {
    let (train_data, test) = synthetic(4, 400, 100, [1, 8, 8], 0.25, 1)?;
    let init = build_model(&ModelConfig::new(Architecture::Convnet, [1, 8, 8], 4).with_seed(2))?;
    let raw = train(&init, &train_data, &TrainConfig::standard(6, 16, 0.1).with_seed(3))?.model;

    let eval = AttackConfig::pgd(0.15, 0.02, 20).with_seed(9);
    let crafting = AttackConfig::pgd(0.15, 0.05, 5).with_random_start(true).with_seed(4);
    let report = |name: &str, m: &advkit::models::Model| -> advkit::Result<()> {
        println!(
            "{name:>4}: clean {:.3}, robust {:.3}",
            accuracy(m, &test)?,
            robust_accuracy(m, &test, &eval)?
        );
        Ok(())
    };
    report("raw", &raw)?;
    let base = TrainConfig::standard(4, 16, 0.05).with_seed(6);
    let nat = defend(&raw, &train_data, &base.clone().with_defense(TrainMode::Nat, AttackConfig::fgsm(0.15)))?;
    report("nat", &nat.model)?;
    let pat = defend(
        &raw,
        &train_data,
        &base.with_defense(TrainMode::Pat, crafting).with_pat_style(PatStyle::PerBatch),
    )?;
    report("pat", &pat.model)?;
    Ok(())
}
