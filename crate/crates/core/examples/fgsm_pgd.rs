//! Train a small model on generated data, then attack it with FGSM and PGD.

use advkit::attacks::{craft_adversarial_set, select_candidates, AttackConfig};
use advkit::defenses::{train, TrainConfig};
use advkit::harness::datasets::synthetic;
use advkit::metrics::mr;
use advkit::models::{accuracy, build_model, Architecture, ModelConfig};

fn main() -> advkit::Result<()> {
    let (train_data, test) = synthetic(4, 400, 100, [1, 8, 8], 0.2, 1)?;
    let init = build_model(&ModelConfig::new(Architecture::Convnet, [1, 8, 8], 4).with_seed(2))?;
    let model = train(&init, &train_data, &TrainConfig::standard(6, 16, 0.1).with_seed(3))?.model;
    println!("clean test accuracy {:.3}", accuracy(&model, &test)?);

    let candidates = select_candidates(&model, &test, 100, 4)?;
    for (name, config) in [
        ("fgsm", AttackConfig::fgsm(0.25)),
        ("pgd", AttackConfig::pgd(0.25, 0.03, 20).with_random_start(true).with_seed(5)),
    ] {
        let set = craft_adversarial_set(&model, &candidates, &config)?;
        println!("{name}: MR {:.3} over {} candidates", mr(&set)?, set.len());
    }
    Ok(())
}
