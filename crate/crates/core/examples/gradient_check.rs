//! Compare reverse-mode input gradients with central finite differences on
//! a small randomly initialised convnet.

use advkit::harness::datasets::synthetic;
use advkit::models::{build_model, Architecture, ModelConfig};
use advkit::numerics::{loss, loss_and_grad_input};

fn main() -> advkit::Result<()> {
    let (data, _) = synthetic(3, 4, 1, [1, 8, 8], 0.2, 11)?;
    let model = build_model(&ModelConfig::new(Architecture::Convnet, [1, 8, 8], 3).with_seed(5))?;
    let (x, y) = (data.images(), data.labels());
    let (_, grad) = loss_and_grad_input(&model, x, y)?;

    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in (0..x.len()).step_by(7) {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.data_mut()[i] += h;
        minus.data_mut()[i] -= h;
        let fd = (loss(&model, &plus, y)? - loss(&model, &minus, y)?) / (2.0 * h);
        let g = grad.data()[i];
        let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-4);
        worst = worst.max(rel);
    }
    println!("{} parameters, max relative error {worst:.2e}", model.param_count());
    Ok(())
}
