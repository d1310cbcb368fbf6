//! Dataset ingestion: IDX, CIFAR-10 binary and a seeded synthetic task.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::DatasetSpec;
use crate::error::{Error, Result};
use crate::numerics::{LabeledBatch, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 3073;
const CIFAR_SHAPE: [usize; 3] = [3, 32, 32];
const CIFAR_CLASSES: usize = 10;
const MNIST_CLASSES: usize = 10;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, context: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(context, bytes.len() as u64, "file ends inside the header"))
}

/// Parses an IDX header; returns the extents and the payload offset.
fn idx_header(bytes: &[u8], magic: u32, context: &str) -> Result<(Vec<usize>, usize)> {
    let found = be_u32(bytes, 0, context)?;
    if found != magic {
        return Err(Error::format(
            context,
            0,
            format!("bad magic {found:#010x}, expected {magic:#010x}"),
        ));
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank)
        .map(|i| be_u32(bytes, 4 + 4 * i, context).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let offset = 4 + 4 * rank;
    let expected = dims.iter().product::<usize>();
    let available = bytes.len() - offset;
    if available != expected {
        let at = (offset + available.min(expected)) as u64;
        return Err(Error::format(
            context,
            at,
            format!("payload has {available} bytes, extents {dims:?} need {expected}"),
        ));
    }
    Ok((dims, offset))
}

/// Decodes an IDX image file (magic 0x803) into an N×1×H×W tensor in [0, 1].
pub fn parse_idx_images(bytes: &[u8], context: &str) -> Result<Tensor> {
    let (dims, offset) = idx_header(bytes, IDX_IMAGES_MAGIC, context)?;
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::format(context, 4, "zero extent in IDX header"));
    }
    let data = bytes[offset..].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![dims[0], 1, dims[1], dims[2]], data)
}

/// Decodes an IDX label file (magic 0x801).
pub fn parse_idx_labels(bytes: &[u8], context: &str) -> Result<Vec<usize>> {
    let (_, offset) = idx_header(bytes, IDX_LABELS_MAGIC, context)?;
    Ok(bytes[offset..].iter().map(|&b| b as usize).collect())
}

fn pair(images: Tensor, labels: Vec<usize>, classes: usize, context: &str) -> Result<LabeledBatch> {
    if images.batch_len() != labels.len() {
        return Err(Error::format(
            context,
            0,
            format!("{} images but {} labels", images.batch_len(), labels.len()),
        ));
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(Error::format(context, i as u64, format!("label {y} out of range")));
    }
    LabeledBatch::new(images, labels, classes)
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<LabeledBatch> {
    let ctx_i = images.display().to_string();
    let ctx_l = labels.display().to_string();
    let x = parse_idx_images(&read(images)?, &ctx_i)?;
    let y = parse_idx_labels(&read(labels)?, &ctx_l)?;
    pair(x, y, MNIST_CLASSES, &ctx_l)
}

/// Decodes concatenated CIFAR-10 records (1 label byte + 3072 CHW pixels).
pub fn parse_cifar(bytes: &[u8], context: &str) -> Result<LabeledBatch> {
    if bytes.is_empty() {
        return Err(Error::format(context, 0, "empty CIFAR file"));
    }
    if bytes.len() % CIFAR_RECORD_LEN != 0 {
        let whole = bytes.len() / CIFAR_RECORD_LEN * CIFAR_RECORD_LEN;
        return Err(Error::format(
            context,
            whole as u64,
            format!("{} bytes is not a multiple of the {CIFAR_RECORD_LEN}-byte record", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD_LEN - 1));
    for (i, rec) in bytes.chunks(CIFAR_RECORD_LEN).enumerate() {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(Error::format(
                context,
                (i * CIFAR_RECORD_LEN) as u64,
                format!("label {} out of range", rec[0]),
            ));
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    let mut shape = vec![n];
    shape.extend(CIFAR_SHAPE);
    LabeledBatch::new(Tensor::new(shape, data)?, labels, CIFAR_CLASSES)
}

pub fn load_cifar(files: &[impl AsRef<Path>]) -> Result<LabeledBatch> {
    let mut out: Option<LabeledBatch> = None;
    for f in files {
        let f = f.as_ref();
        let part = parse_cifar(&read(f)?, &f.display().to_string())?;
        out = Some(match out {
            None => part,
            Some(acc) => acc.concat(&part)?,
        });
    }
    out.ok_or_else(|| Error::config("no CIFAR files given"))
}

/// Seeded Gaussian-blob classification task. Each class has a prototype of
/// a few smooth bumps; samples are the prototype plus pixel noise, clamped
/// to [0, 1]. Both splits share the prototypes.
pub fn synthetic(
    classes: usize,
    train_size: usize,
    test_size: usize,
    shape: [usize; 3],
    noise: f64,
    seed: u64,
) -> Result<(LabeledBatch, LabeledBatch)> {
    let [c, h, w] = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bumps = 3;
    let prototypes: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let centres: Vec<(usize, f64, f64, f64)> = (0..bumps)
                .map(|_| {
                    (
                        rng.gen_range(0..c),
                        rng.gen_range(0.0..h as f64),
                        rng.gen_range(0.0..w as f64),
                        rng.gen_range(0.15..0.3) * (h.min(w) as f64),
                    )
                })
                .collect();
            let mut img = vec![0.1; c * h * w];
            for (ch, cy, cx, r) in centres {
                for y in 0..h {
                    for x in 0..w {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        img[ch * h * w + y * w + x] += 0.8 * (-d2 / (2.0 * r * r)).exp();
                    }
                }
            }
            img.iter_mut().for_each(|v| *v = v.min(1.0));
            img
        })
        .collect();
    let mut sample = |n: usize| -> Result<LabeledBatch> {
        let mut data = Vec::with_capacity(n * c * h * w);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % classes;
            labels.push(y);
            for &p in &prototypes[y] {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                data.push((p + noise * z).clamp(0.0, 1.0));
            }
        }
        LabeledBatch::new(Tensor::new(vec![n, c, h, w], data)?, labels, classes)
    };
    let train = sample(train_size)?;
    let test = sample(test_size)?;
    Ok((train, test))
}

fn limit(batch: LabeledBatch, n: Option<usize>) -> LabeledBatch {
    match n {
        Some(n) if n < batch.len() => batch.take(n),
        _ => batch,
    }
}

/// Loads the train and test splits named by `spec`.
pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<(LabeledBatch, LabeledBatch)> {
    match spec {
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            train_limit,
            test_limit,
        } => Ok((
            limit(load_idx(train_images, train_labels)?, *train_limit),
            limit(load_idx(test_images, test_labels)?, *test_limit),
        )),
        DatasetSpec::CifarBinary {
            train_files,
            test_file,
            train_limit,
            test_limit,
        } => Ok((
            limit(load_cifar(train_files)?, *train_limit),
            limit(load_cifar(&[test_file])?, *test_limit),
        )),
        DatasetSpec::Synthetic {
            classes,
            train_size,
            test_size,
            channels,
            height,
            width,
            noise,
        } => synthetic(*classes, *train_size, *test_size, [*channels, *height, *width], *noise, seed),
    }
}
