//! Binary artifacts: the `RFT1` tensor container, model checkpoints and
//! persisted adversarial sets.
//!
//! A tensor container is `"RFT1"`, a dtype byte (1 = f64, 2 = u8), the rank
//! as a little-endian u64, one little-endian u64 per extent and the raw
//! little-endian payload. Checkpoints and adversarial sets are bundles: a
//! 4-byte magic, a u32 version, a u64 length, a JSON header carrying the
//! config hash, then a fixed number of tensor containers and nothing else.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attacks::{AdversarialRecord, AdversarialSet, AttackConfig};
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::numerics::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"RFT1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RFCK";
pub const ADVSET_MAGIC: &[u8; 4] = b"RFAS";
const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F64 = 1,
    U8 = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    U8(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorContainer {
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl TensorContainer {
    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            payload: Payload::F64(t.data().to_vec()),
        }
    }

    pub fn dtype(&self) -> DType {
        match self.payload {
            Payload::F64(_) => DType::F64,
            Payload::U8(_) => DType::U8,
        }
    }

    /// f64 payloads convert losslessly; u8 payloads are widened as-is.
    pub fn into_tensor(self) -> Result<Tensor> {
        let data = match self.payload {
            Payload::F64(v) => v,
            Payload::U8(v) => v.into_iter().map(f64::from).collect(),
        };
        Tensor::new(self.shape, data)
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(self.dtype() as u8);
        out.extend((self.shape.len() as u64).to_le_bytes());
        for &d in &self.shape {
            out.extend((d as u64).to_le_bytes());
        }
        match &self.payload {
            Payload::F64(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
            Payload::U8(v) => out.extend_from_slice(v),
        }
    }

    /// Decodes one container starting at `cursor.pos`.
    pub fn decode(cursor: &mut Cursor<'_>) -> Result<Self> {
        let magic = cursor.take(4, "tensor magic")?;
        if magic != TENSOR_MAGIC {
            return Err(cursor.error_at(cursor.pos - 4, format!("bad tensor magic {magic:?}")));
        }
        let dtype = match cursor.take(1, "dtype")?[0] {
            1 => DType::F64,
            2 => DType::U8,
            other => return Err(cursor.error_at(cursor.pos - 1, format!("unknown dtype code {other}"))),
        };
        let rank = cursor.u64("rank")? as usize;
        if rank > 16 {
            return Err(cursor.error_at(cursor.pos - 8, format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = cursor.u64("extent")? as usize;
            count = count
                .checked_mul(d)
                .ok_or_else(|| cursor.error_at(cursor.pos - 8, "extent product overflows"))?;
            shape.push(d);
        }
        let size = match dtype {
            DType::F64 => 8,
            DType::U8 => 1,
        };
        let bytes = count
            .checked_mul(size)
            .ok_or_else(|| cursor.error_at(cursor.pos, "payload size overflows"))?;
        let raw = cursor.take(bytes, "payload")?;
        let payload = match dtype {
            DType::F64 => Payload::F64(raw.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::U8 => Payload::U8(raw.to_vec()),
        };
        Ok(Self { shape, payload })
    }
}

/// Bounds-checked reader that reports byte offsets in its errors.
pub struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: String,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8], context: impl Into<String>) -> Self {
        Self {
            bytes,
            pos: 0,
            context: context.into(),
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    fn error_at(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::format(self.context.clone(), offset as u64, reason)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error_at(
                self.bytes.len(),
                format!("truncated while reading {what} ({n} bytes from offset {})", self.pos),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.error_at(self.pos, format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

/// Writes via a temporary sibling and a rename, so readers never see a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut out = Vec::new();
    TensorContainer::from_tensor(t).encode(&mut out);
    write_atomic(path, &out)
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = Cursor::new(&bytes, path.display().to_string());
    let c = TensorContainer::decode(&mut cursor)?;
    cursor.finish()?;
    c.into_tensor()
}

fn encode_bundle<H: Serialize>(magic: &[u8; 4], header: &H, tensors: &[&Tensor]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header).map_err(|e| Error::internal(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend(BUNDLE_VERSION.to_le_bytes());
    out.extend((json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        TensorContainer::from_tensor(t).encode(&mut out);
    }
    Ok(out)
}

fn decode_bundle<H: DeserializeOwned>(
    bytes: &[u8],
    magic: &[u8; 4],
    context: &str,
    tensor_count: impl FnOnce(&H) -> usize,
) -> Result<(H, Vec<Tensor>)> {
    let mut cursor = Cursor::new(bytes, context);
    let found = cursor.take(4, "magic")?;
    if found != magic {
        return Err(cursor.error_at(0, format!("bad magic {found:?}, expected {magic:?}")));
    }
    let version = cursor.u32("version")?;
    if version != BUNDLE_VERSION {
        return Err(cursor.error_at(4, format!("unsupported version {version}")));
    }
    let len = cursor.u64("header length")? as usize;
    let start = cursor.position();
    let header: H = serde_json::from_slice(cursor.take(len, "header")?)
        .map_err(|e| cursor.error_at(start, format!("bad header: {e}")))?;
    let n = tensor_count(&header);
    let tensors = (0..n)
        .map(|_| TensorContainer::decode(&mut cursor).and_then(TensorContainer::into_tensor))
        .collect::<Result<Vec<_>>>()?;
    cursor.finish()?;
    Ok((header, tensors))
}

fn check_hash(path: &Path, expected: Option<&str>, found: &str) -> Result<()> {
    match expected {
        Some(e) if e != found => Err(Error::HashMismatch {
            path: path.to_path_buf(),
            expected: e.to_string(),
            found: found.to_string(),
        }),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: String,
    pub model: ModelConfig,
    pub tensors: usize,
}

pub fn encode_checkpoint(model: &Model, config_hash: &str) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config_hash: config_hash.to_string(),
        model: model.config().clone(),
        tensors: model.params().len(),
    };
    encode_bundle(CHECKPOINT_MAGIC, &header, &model.params())
}

pub fn save_checkpoint(model: &Model, config_hash: &str, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model, config_hash)?)
}

/// Loads a checkpoint. With `expected_hash` set, a checkpoint written under
/// a different config is refused.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<(Model, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, tensors): (CheckpointHeader, _) =
        decode_bundle(&bytes, CHECKPOINT_MAGIC, &path.display().to_string(), |h: &CheckpointHeader| h.tensors)?;
    check_hash(path, expected_hash, &header.config_hash)?;
    let model = Model::from_params(&header.model, tensors)
        .map_err(|e| Error::format(path.display().to_string(), 0, format!("parameters do not fit the model: {e}")))?;
    Ok((model, header))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdvSetHeader {
    config_hash: String,
    attack: AttackConfig,
    model_id: String,
    y_true: Vec<usize>,
}

/// Tensors: clean inputs, adversarial inputs, model outputs and crafting
/// times, each stacked over records.
pub fn save_adversarial_set(set: &AdversarialSet, config_hash: &str, path: &Path) -> Result<()> {
    if set.is_empty() {
        return Err(Error::input("refusing to persist an empty adversarial set"));
    }
    let header = AdvSetHeader {
        config_hash: config_hash.to_string(),
        attack: set.config.clone(),
        model_id: set.model_id.clone(),
        y_true: set.records.iter().map(|r| r.y_true).collect(),
    };
    let x = Tensor::concat(&set.records.iter().map(|r| &r.x).collect::<Vec<_>>())?;
    let x_star = Tensor::concat(&set.records.iter().map(|r| &r.x_star).collect::<Vec<_>>())?;
    let k = set.records[0].adv_output.len();
    let outputs = Tensor::new(
        vec![set.len(), k],
        set.records.iter().flat_map(|r| r.adv_output.iter().copied()).collect(),
    )?;
    let times = Tensor::new(vec![set.len()], set.records.iter().map(|r| r.crafting_time).collect())?;
    write_atomic(path, &encode_bundle(ADVSET_MAGIC, &header, &[&x, &x_star, &outputs, &times])?)
}

pub fn load_adversarial_set(path: &Path, expected_hash: Option<&str>) -> Result<AdversarialSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let context = path.display().to_string();
    let (header, tensors): (AdvSetHeader, _) = decode_bundle(&bytes, ADVSET_MAGIC, &context, |_| 4)?;
    check_hash(path, expected_hash, &header.config_hash)?;
    let [x, x_star, outputs, times]: [Tensor; 4] = tensors.try_into().expect("four tensors decoded");
    let n = header.y_true.len();
    if [x.batch_len(), x_star.batch_len(), outputs.batch_len(), times.batch_len()] != [n; 4] || x.shape() != x_star.shape() {
        return Err(Error::format(context, 0, "record counts disagree"));
    }
    let records = (0..n)
        .map(|i| {
            let (xi, si) = (x.select(i), x_star.select(i));
            Ok(AdversarialRecord {
                delta: si.sub(&xi)?,
                x: xi,
                x_star: si,
                y_true: header.y_true[i],
                adv_output: outputs.item(i).to_vec(),
                crafting_time: times.data()[i],
                trace: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AdversarialSet {
        config: header.attack,
        model_id: header.model_id,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_layout_is_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -0.5]).unwrap();
        let mut out = Vec::new();
        TensorContainer::from_tensor(&t).encode(&mut out);
        assert_eq!(&out[..4], b"RFT1");
        assert_eq!(out[4], 1);
        assert_eq!(&out[5..13], &2u64.to_le_bytes());
        assert_eq!(&out[13..21], &2u64.to_le_bytes());
        assert_eq!(&out[21..29], &1u64.to_le_bytes());
        assert_eq!(&out[29..37], &1.0f64.to_le_bytes());
        assert_eq!(out.len(), 4 + 1 + 8 + 16 + 16);
    }

    #[test]
    fn u8_payload() {
        let c = TensorContainer {
            shape: vec![3],
            payload: Payload::U8(vec![0, 7, 255]),
        };
        let mut out = Vec::new();
        c.encode(&mut out);
        assert_eq!(out.len(), 4 + 1 + 8 + 8 + 3);
        let back = TensorContainer::decode(&mut Cursor::new(&out, "t")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.into_tensor().unwrap().data(), &[0.0, 7.0, 255.0]);
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let t = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1);
        let mut out = Vec::new();
        TensorContainer::from_tensor(&t).encode(&mut out);
        for cut in 0..out.len() {
            let r = TensorContainer::decode(&mut Cursor::new(&out[..cut], "t"));
            assert!(matches!(r, Err(Error::Format { .. })), "cut at {cut}");
        }
    }

    #[test]
    fn bad_dtype() {
        let mut out = Vec::new();
        TensorContainer::from_tensor(&Tensor::zeros(&[1])).encode(&mut out);
        out[4] = 9;
        assert!(matches!(
            TensorContainer::decode(&mut Cursor::new(&out, "t")),
            Err(Error::Format { offset: 4, .. })
        ));
    }
}
