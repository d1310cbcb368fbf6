//! Small image classifiers: softmax regression, an MLP, a plain conv net and
//! a residual net whose stage widths scale with `width_factor`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, forward, Layer, LabeledBatch, Network, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Flatten followed by a single fully-connected layer.
    Linear,
    Mlp,
    Convnet,
    ResnetSmall,
    /// Hand-assembled network, see [`Model::from_network`].
    Custom,
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Architecture::Linear),
            "mlp" => Ok(Architecture::Mlp),
            "convnet" => Ok(Architecture::Convnet),
            "resnet_small" => Ok(Architecture::ResnetSmall),
            other => Err(Error::config(format!(
                "unsupported architecture `{other}` (expected linear, mlp, convnet or resnet_small)"
            ))),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Architecture::Linear => "linear",
            Architecture::Mlp => "mlp",
            Architecture::Convnet => "convnet",
            Architecture::ResnetSmall => "resnet_small",
            Architecture::Custom => "custom",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// C×H×W.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    #[serde(default = "default_width")]
    pub width_factor: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_width() -> usize {
    1
}

/// Stem, stage 1, stage 2, stage 3 channel widths of `resnet_small` at
/// width factor 1.
pub const RESNET_BASE_WIDTHS: [usize; 4] = [16, 16, 32, 64];
/// Conv 1, conv 2 and hidden fully-connected widths of `convnet`.
pub const CONVNET_BASE_WIDTHS: [usize; 3] = [8, 16, 64];
/// Hidden widths of `mlp`.
pub const MLP_BASE_WIDTHS: [usize; 2] = [64, 64];

impl ModelConfig {
    pub fn new(architecture: Architecture, input_shape: [usize; 3], num_classes: usize) -> Self {
        Self {
            architecture,
            input_shape,
            num_classes,
            width_factor: 1,
            seed: 0,
        }
    }

    pub fn with_width(mut self, width_factor: usize) -> Self {
        self.width_factor = width_factor;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_factor < 1 {
            return Err(Error::config("width_factor must be ≥ 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be ≥ 2"));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::config(format!(
                "input_shape extents must be positive, got {:?}",
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Widths of the layers that `width_factor` scales, in network order.
    pub fn scaled_widths(&self) -> Vec<usize> {
        let w = self.width_factor;
        match self.architecture {
            Architecture::ResnetSmall => RESNET_BASE_WIDTHS.iter().map(|b| b * w).collect(),
            Architecture::Convnet => CONVNET_BASE_WIDTHS.iter().map(|b| b * w).collect(),
            Architecture::Mlp => MLP_BASE_WIDTHS.iter().map(|b| b * w).collect(),
            Architecture::Linear | Architecture::Custom => Vec::new(),
        }
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::from_fn(shape, |_| self.rng.gen_range(-limit..limit))
    }

    fn linear(&mut self, inp: usize, out: usize) -> Layer {
        Layer::Linear {
            weight: self.uniform(&[out, inp], inp, out),
            bias: Tensor::zeros(&[out]),
        }
    }

    fn conv(&mut self, inp: usize, out: usize, kernel: usize, stride: usize, padding: usize) -> Layer {
        let area = kernel * kernel;
        Layer::Conv2d {
            weight: self.uniform(&[out, inp, kernel, kernel], inp * area, out * area),
            bias: Tensor::zeros(&[out]),
            stride,
            padding,
        }
    }

    fn residual_stage(&mut self, inp: usize, out: usize, stride: usize) -> Vec<Layer> {
        let body = vec![
            self.conv(inp, out, 3, stride, 1),
            Layer::Relu,
            self.conv(out, out, 3, 1, 1),
        ];
        let shortcut = (inp != out || stride != 1).then(|| Box::new(self.conv(inp, out, 1, stride, 0)));
        vec![Layer::Residual { body, shortcut }, Layer::Relu]
    }
}

/// A classifier: configuration plus its parameterised layer stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    config: ModelConfig,
    network: Network,
}

/// Builds a freshly initialised model; deterministic in `config` (including
/// its seed).
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let [c, h, w] = config.input_shape;
    let k = config.num_classes;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let widths = config.scaled_widths();
    let layers = match config.architecture {
        Architecture::Linear => vec![Layer::Flatten, init.linear(c * h * w, k)],
        Architecture::Mlp => vec![
            Layer::Flatten,
            init.linear(c * h * w, widths[0]),
            Layer::Relu,
            init.linear(widths[0], widths[1]),
            Layer::Relu,
            init.linear(widths[1], k),
        ],
        Architecture::Convnet => {
            if h < 4 || w < 4 {
                return Err(Error::config(format!("convnet needs images of at least 4×4, got {h}×{w}")));
            }
            vec![
                init.conv(c, widths[0], 3, 1, 1),
                Layer::Relu,
                Layer::MaxPool2d { size: 2 },
                init.conv(widths[0], widths[1], 3, 1, 1),
                Layer::Relu,
                Layer::MaxPool2d { size: 2 },
                Layer::Flatten,
                init.linear(widths[1] * (h / 4) * (w / 4), widths[2]),
                Layer::Relu,
                init.linear(widths[2], k),
            ]
        }
        Architecture::ResnetSmall => {
            let mut layers = vec![init.conv(c, widths[0], 3, 1, 1), Layer::Relu];
            layers.extend(init.residual_stage(widths[0], widths[1], 1));
            layers.extend(init.residual_stage(widths[1], widths[2], 2));
            layers.extend(init.residual_stage(widths[2], widths[3], 2));
            layers.push(Layer::GlobalAvgPool);
            layers.push(init.linear(widths[3], k));
            layers
        }
        Architecture::Custom => {
            return Err(Error::config(
                "custom networks are assembled with Model::from_network, not built from a config",
            ))
        }
    };
    Ok(Model {
        config: config.clone(),
        network: Network::new(layers),
    })
}

impl Model {
    /// Wraps a hand-assembled network mapping C×H×W inputs to `num_classes`
    /// logits.
    pub fn from_network(input_shape: [usize; 3], num_classes: usize, network: Network) -> Result<Model> {
        let config = ModelConfig::new(Architecture::Custom, input_shape, num_classes);
        config.validate()?;
        let model = Model { config, network };
        let probe = Tensor::zeros(&[1, input_shape[0], input_shape[1], input_shape[2]]);
        let out = model.network.forward(&probe)?;
        if out.shape() != [1, num_classes] {
            return Err(Error::config(format!(
                "network produces {:?} logits for a single input, expected [1, {num_classes}]",
                out.shape()
            )));
        }
        Ok(model)
    }

    /// Reassembles a model from a config and matching parameter tensors.
    pub fn from_params(config: &ModelConfig, params: Vec<Tensor>) -> Result<Model> {
        let mut model = build_model(config)?;
        {
            let slots = model.params_mut();
            if slots.len() != params.len() {
                return Err(Error::config(format!(
                    "config needs {} parameter tensors, got {}",
                    slots.len(),
                    params.len()
                )));
            }
            for (slot, p) in slots.into_iter().zip(params) {
                if slot.shape() != p.shape() {
                    return Err(Error::config(format!(
                        "parameter shape {:?} does not match config shape {:?}",
                        p.shape(),
                        slot.shape()
                    )));
                }
                *slot = p;
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.config.input_shape
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.network.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.network.params_mut()
    }

    pub fn param_count(&self) -> usize {
        self.network.param_count()
    }

    pub(crate) fn check_input(&self, images: &Tensor) -> Result<()> {
        let s = images.shape();
        if s.len() != 4 || s[1..] != self.config.input_shape {
            return Err(Error::config(format!(
                "model expects N×{:?} images, got {s:?}",
                self.config.input_shape
            )));
        }
        Ok(())
    }

    /// Predicted class per image (ties to the lowest index).
    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let probs = forward(self, images)?;
        Ok((0..probs.batch_len()).map(|i| argmax(probs.item(i))).collect())
    }
}

/// Short content hash of a model's configuration and parameter bits.
pub fn model_fingerprint(model: &Model) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(model.config()).expect("config serialises"));
    for p in model.params() {
        for d in p.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in p.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..8])
}

/// Fraction of `data` whose predicted class equals its label.
pub fn accuracy(model: &Model, data: &LabeledBatch) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::input("accuracy of an empty batch"));
    }
    let preds = predict_batched(model, data.images())?;
    let correct = preds.iter().zip(data.labels()).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / data.len() as f64)
}

/// [`Model::predict`] in fixed-size chunks, evaluated in parallel.
pub fn predict_batched(model: &Model, images: &Tensor) -> Result<Vec<usize>> {
    use rayon::prelude::*;
    const CHUNK: usize = 64;
    let n = images.batch_len();
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + CHUNK).min(n)).collect();
            model.predict(&images.gather(&idx))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Output distributions for all images, chunked like [`predict_batched`].
pub fn forward_batched(model: &Model, images: &Tensor) -> Result<Tensor> {
    use rayon::prelude::*;
    const CHUNK: usize = 64;
    let n = images.batch_len();
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + CHUNK).min(n)).collect();
            forward(model, &images.gather(&idx))
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat(&parts.iter().collect::<Vec<_>>())
}
