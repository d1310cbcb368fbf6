//! Full attack utility report for a PGD attack on generated data.

use advkit::attacks::{craft_adversarial_set, select_candidates, AttackConfig};
use advkit::defenses::{train, TrainConfig};
use advkit::harness::datasets::synthetic;
use advkit::metrics::{attack_report, BlurSpec};
use advkit::models::{build_model, Architecture, ModelConfig};

fn main() -> advkit::Result<()> {
    let (train_data, test) = synthetic(4, 400, 100, [1, 8, 8], 0.2, 1)?;
    let init = build_model(&ModelConfig::new(Architecture::Convnet, [1, 8, 8], 4).with_seed(2))?;
    let model = train(&init, &train_data, &TrainConfig::standard(6, 16, 0.1).with_seed(3))?.model;
    let candidates = select_candidates(&model, &test, 100, 4)?;
    let set = craft_adversarial_set(&model, &candidates, &AttackConfig::pgd(0.25, 0.03, 20).with_seed(5))?;
    let report = attack_report(&set, &model, &BlurSpec::default())?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serialises"));
    Ok(())
}
