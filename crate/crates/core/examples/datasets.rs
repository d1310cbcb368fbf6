//! Load the bundled MNIST subset and round-trip a tensor through the
//! container format.

use std::path::Path;

use advkit::harness::container::{load_tensor, save_tensor};
use advkit::harness::datasets::load_idx;

fn main() -> advkit::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/mnist-subset");
    let train = load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
    let test = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;
    println!("train {:?}, test {:?}", train.images().shape(), test.images().shape());

    let mut counts = [0usize; 10];
    for &y in train.labels() {
        counts[y] += 1;
    }
    println!("train label counts {counts:?}");

    let path = std::env::temp_dir().join("advkit-example-images.rft");
    save_tensor(&path, test.images())?;
    let back = load_tensor(&path)?;
    println!("round trip bitwise equal: {}", back.bitwise_eq(test.images()));
    std::fs::remove_file(&path).ok();
    Ok(())
}
