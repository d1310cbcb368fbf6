//! Clean accuracy of a convnet at width factors 1, 2 and 4, averaged over
//! three seeds.

use advkit::defenses::{train, TrainConfig};
use advkit::harness::datasets::synthetic;
use advkit::models::{accuracy, build_model, Architecture, ModelConfig};

fn main() -> advkit::Result<()> {
    let (train_data, test) = synthetic(6, 600, 300, [1, 8, 8], 0.35, 1)?;
    for width in [1, 2, 4] {
        let mut accs = Vec::new();
        for seed in 0..3 {
            let init = build_model(
                &ModelConfig::new(Architecture::Convnet, [1, 8, 8], 6)
                    .with_width(width)
                    .with_seed(seed),
            )?;
            let m = train(&init, &train_data, &TrainConfig::standard(5, 16, 0.1).with_seed(100 + seed))?.model;
            accs.push(accuracy(&m, &test)?);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!("width {width}: mean clean accuracy {mean:.4} {accs:.3?}");
    }
    Ok(())
}
