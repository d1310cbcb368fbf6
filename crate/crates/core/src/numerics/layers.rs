//! Layer set and the reverse-mode sweep over it.
//!
//! Every layer records what its backward pass needs during a traced forward
//! pass; [`Network::backward`] then replays the trace in reverse, producing the
//! input gradient and, on request, the gradient of every parameter tensor.

use serde::{Deserialize, Serialize};

use super::gemm::{gemm, MatRef};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    /// `y = x·Wᵀ + b` with `W` of shape out × in.
    Linear { weight: Tensor, bias: Tensor },
    /// Square-kernel convolution, `W` of shape out × in × k × k.
    Conv2d {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    Relu,
    /// Non-overlapping max pooling; trailing rows/columns that do not fill a
    /// window are dropped.
    MaxPool2d { size: usize },
    GlobalAvgPool,
    Flatten,
    /// `body(x) + shortcut(x)`; an absent shortcut is the identity.
    Residual {
        body: Vec<Layer>,
        shortcut: Option<Box<Layer>>,
    },
    /// Rounds intensities to `levels` evenly spaced values. Has no gradient.
    Quantize { levels: u32 },
}

#[derive(Debug)]
pub enum Trace {
    Input(Tensor),
    Mask(Vec<bool>),
    Pool { input_shape: Vec<usize>, argmax: Vec<usize> },
    Shape(Vec<usize>),
    Residual { body: Vec<Trace>, shortcut: Option<Box<Trace>> },
    Opaque,
}

fn conv_out(extent: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = extent + 2 * padding;
    if padded < kernel {
        return Err(Error::config(format!(
            "kernel {kernel} larger than padded extent {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

struct ConvGeom {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        let k = self.kernel;
        for c in 0..self.channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * p..][..p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        let dst = &mut row[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.height as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            *d = if ix < 0 || ix >= self.width as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let p = self.positions();
        let k = self.kernel;
        for c in 0..self.channels {
            let plane = &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * p..][..p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.width as isize {
                                dst[ix as usize] += row[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Layer {
    pub fn linear(weight: Tensor, bias: Tensor) -> Self {
        Layer::Linear { weight, bias }
    }

    /// Number of parameter tensors owned by this layer (and its children).
    pub fn param_tensor_count(&self) -> usize {
        match self {
            Layer::Linear { .. } | Layer::Conv2d { .. } => 2,
            Layer::Residual { body, shortcut } => {
                body.iter().map(Layer::param_tensor_count).sum::<usize>()
                    + shortcut.as_ref().map_or(0, |s| s.param_tensor_count())
            }
            _ => 0,
        }
    }

    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        match self {
            Layer::Linear { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                out.push(weight);
                out.push(bias);
            }
            Layer::Residual { body, shortcut } => {
                for l in body {
                    l.collect_params(out);
                }
                if let Some(s) = shortcut {
                    s.collect_params(out);
                }
            }
            _ => {}
        }
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        match self {
            Layer::Linear { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                out.push(weight);
                out.push(bias);
            }
            Layer::Residual { body, shortcut } => {
                for l in body {
                    l.collect_params_mut(out);
                }
                if let Some(s) = shortcut {
                    s.collect_params_mut(out);
                }
            }
            _ => {}
        }
    }

    fn conv_geom(weight: &Tensor, stride: usize, padding: usize, input: &[usize]) -> Result<ConvGeom> {
        let ws = weight.shape();
        if input.len() != 4 || input[1] != ws[1] {
            return Err(Error::config(format!(
                "conv expects N×{}×H×W input, got {input:?}",
                ws[1]
            )));
        }
        Ok(ConvGeom {
            channels: ws[1],
            height: input[2],
            width: input[3],
            kernel: ws[2],
            stride,
            padding,
            out_h: conv_out(input[2], ws[2], stride, padding)?,
            out_w: conv_out(input[3], ws[3], stride, padding)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, None)
    }

    pub fn forward_traced(&self, x: &Tensor) -> Result<(Tensor, Trace)> {
        let mut trace = None;
        let y = self.run(x, Some(&mut trace))?;
        Ok((y, trace.unwrap_or(Trace::Opaque)))
    }

    fn run(&self, x: &Tensor, trace: Option<&mut Option<Trace>>) -> Result<Tensor> {
        let record = trace.is_some();
        let (y, t) = match self {
            Layer::Linear { weight, bias } => {
                let (out, inp) = (weight.shape()[0], weight.shape()[1]);
                if x.rank() != 2 || x.shape()[1] != inp {
                    return Err(Error::config(format!(
                        "linear layer expects N×{inp} input, got {:?}",
                        x.shape()
                    )));
                }
                let n = x.shape()[0];
                let mut y = vec![0.0; n * out];
                for row in y.chunks_mut(out) {
                    row.copy_from_slice(bias.data());
                }
                gemm(
                    1.0,
                    MatRef::new(x.data(), n, inp),
                    MatRef::new(weight.data(), out, inp).t(),
                    1.0,
                    &mut y,
                );
                (Tensor::new(vec![n, out], y)?, record.then(|| Trace::Input(x.clone())))
            }
            Layer::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => {
                let g = Self::conv_geom(weight, *stride, *padding, x.shape())?;
                let n = x.shape()[0];
                let out_c = weight.shape()[0];
                let p = g.positions();
                let mut cols = vec![0.0; g.patch_len() * p];
                let mut y = vec![0.0; n * out_c * p];
                for (i, out) in y.chunks_mut(out_c * p).enumerate() {
                    g.im2col(x.item(i), &mut cols);
                    for (o, row) in out.chunks_mut(p).enumerate() {
                        row.fill(bias.data()[o]);
                    }
                    gemm(
                        1.0,
                        MatRef::new(weight.data(), out_c, g.patch_len()),
                        MatRef::new(&cols, g.patch_len(), p),
                        1.0,
                        out,
                    );
                }
                (
                    Tensor::new(vec![n, out_c, g.out_h, g.out_w], y)?,
                    record.then(|| Trace::Input(x.clone())),
                )
            }
            Layer::Relu => {
                let y = x.map(|v| if v > 0.0 { v } else { 0.0 });
                let t = record.then(|| Trace::Mask(x.data().iter().map(|&v| v > 0.0).collect()));
                (y, t)
            }
            Layer::MaxPool2d { size } => {
                let s = x.shape();
                if s.len() != 4 || s[2] < *size || s[3] < *size {
                    return Err(Error::config(format!(
                        "max pool {size} does not fit input {s:?}"
                    )));
                }
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (oh, ow) = (h / size, w / size);
                let mut y = Vec::with_capacity(n * c * oh * ow);
                let mut argmax = Vec::with_capacity(if record { n * c * oh * ow } else { 0 });
                for plane in 0..n * c {
                    let base = plane * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = base + oy * size * w + ox * size;
                            for dy in 0..*size {
                                for dx in 0..*size {
                                    let idx = base + (oy * size + dy) * w + ox * size + dx;
                                    if x.data()[idx] > x.data()[best] {
                                        best = idx;
                                    }
                                }
                            }
                            y.push(x.data()[best]);
                            if record {
                                argmax.push(best);
                            }
                        }
                    }
                }
                (
                    Tensor::new(vec![n, c, oh, ow], y)?,
                    record.then(|| Trace::Pool {
                        input_shape: s.to_vec(),
                        argmax,
                    }),
                )
            }
            Layer::GlobalAvgPool => {
                let s = x.shape();
                if s.len() != 4 {
                    return Err(Error::config(format!("global pool expects N×C×H×W, got {s:?}")));
                }
                let hw = s[2] * s[3];
                let y: Vec<f64> = x
                    .data()
                    .chunks(hw)
                    .map(|plane| plane.iter().sum::<f64>() / hw as f64)
                    .collect();
                (
                    Tensor::new(vec![s[0], s[1]], y)?,
                    record.then(|| Trace::Shape(s.to_vec())),
                )
            }
            Layer::Flatten => {
                let n = x.batch_len();
                let y = x.clone().reshape(&[n, x.item_len()])?;
                (y, record.then(|| Trace::Shape(x.shape().to_vec())))
            }
            Layer::Residual { body, shortcut } => {
                let mut body_traces = Vec::new();
                let mut h = x.clone();
                for l in body {
                    if record {
                        let (next, t) = l.forward_traced(&h)?;
                        body_traces.push(t);
                        h = next;
                    } else {
                        h = l.forward(&h)?;
                    }
                }
                let (skip, skip_trace) = match shortcut {
                    Some(s) if record => {
                        let (v, t) = s.forward_traced(x)?;
                        (v, Some(Box::new(t)))
                    }
                    Some(s) => (s.forward(x)?, None),
                    None => (x.clone(), None),
                };
                if skip.shape() != h.shape() {
                    return Err(Error::config(format!(
                        "residual branch shapes differ: {:?} vs {:?}",
                        h.shape(),
                        skip.shape()
                    )));
                }
                h.add_assign(&skip)?;
                (
                    h,
                    record.then(|| Trace::Residual {
                        body: body_traces,
                        shortcut: skip_trace,
                    }),
                )
            }
            Layer::Quantize { levels } => {
                let top = (*levels).max(2) as f64 - 1.0;
                (x.map(|v| (v * top).round() / top), record.then_some(Trace::Opaque))
            }
        };
        if let (Some(slot), Some(t)) = (trace, t) {
            *slot = Some(t);
        }
        Ok(y)
    }

    /// Propagates `grad_out` back through the layer.
    ///
    /// When `grads` is given it must hold this layer's parameter-gradient
    /// slots (see [`Layer::param_tensor_count`]); gradients are accumulated
    /// into them.
    pub fn backward(&self, trace: &Trace, grad_out: Tensor, grads: Option<&mut [Tensor]>) -> Result<Tensor> {
        match (self, trace) {
            (Layer::Linear { weight, .. }, Trace::Input(x)) => {
                let (out, inp) = (weight.shape()[0], weight.shape()[1]);
                let n = x.shape()[0];
                if let Some(g) = grads {
                    let (gw, gb) = g.split_at_mut(1);
                    gemm(
                        1.0,
                        MatRef::new(grad_out.data(), n, out).t(),
                        MatRef::new(x.data(), n, inp),
                        1.0,
                        gw[0].data_mut(),
                    );
                    let gb = gb[0].data_mut();
                    for row in grad_out.data().chunks(out) {
                        for (b, v) in gb.iter_mut().zip(row) {
                            *b += v;
                        }
                    }
                }
                let mut dx = vec![0.0; n * inp];
                gemm(
                    1.0,
                    MatRef::new(grad_out.data(), n, out),
                    MatRef::new(weight.data(), out, inp),
                    0.0,
                    &mut dx,
                );
                Tensor::new(x.shape().to_vec(), dx)
            }
            (
                Layer::Conv2d {
                    weight,
                    stride,
                    padding,
                    ..
                },
                Trace::Input(x),
            ) => {
                let g = Self::conv_geom(weight, *stride, *padding, x.shape())?;
                let n = x.shape()[0];
                let out_c = weight.shape()[0];
                let p = g.positions();
                let kk = g.patch_len();
                let mut cols = vec![0.0; kk * p];
                let mut dcols = vec![0.0; kk * p];
                let mut dx = vec![0.0; x.len()];
                let mut grads = grads;
                for i in 0..n {
                    let dy = &grad_out.data()[i * out_c * p..(i + 1) * out_c * p];
                    if let Some(g_slots) = grads.as_deref_mut() {
                        g.im2col(x.item(i), &mut cols);
                        let (gw, gb) = g_slots.split_at_mut(1);
                        gemm(
                            1.0,
                            MatRef::new(dy, out_c, p),
                            MatRef::new(&cols, kk, p).t(),
                            1.0,
                            gw[0].data_mut(),
                        );
                        for (b, row) in gb[0].data_mut().iter_mut().zip(dy.chunks(p)) {
                            *b += row.iter().sum::<f64>();
                        }
                    }
                    gemm(
                        1.0,
                        MatRef::new(weight.data(), out_c, kk).t(),
                        MatRef::new(dy, out_c, p),
                        0.0,
                        &mut dcols,
                    );
                    g.col2im(&dcols, &mut dx[i * x.item_len()..(i + 1) * x.item_len()]);
                }
                Tensor::new(x.shape().to_vec(), dx)
            }
            (Layer::Relu, Trace::Mask(mask)) => {
                let mut g = grad_out;
                for (v, &m) in g.data_mut().iter_mut().zip(mask) {
                    if !m {
                        *v = 0.0;
                    }
                }
                Ok(g)
            }
            (Layer::MaxPool2d { .. }, Trace::Pool { input_shape, argmax }) => {
                let mut dx = Tensor::zeros(input_shape);
                let d = dx.data_mut();
                for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
                    d[idx] += g;
                }
                Ok(dx)
            }
            (Layer::GlobalAvgPool, Trace::Shape(shape)) => {
                let hw = shape[2] * shape[3];
                let mut dx = Tensor::zeros(shape);
                for (plane, &g) in dx.data_mut().chunks_mut(hw).zip(grad_out.data()) {
                    plane.fill(g / hw as f64);
                }
                Ok(dx)
            }
            (Layer::Flatten, Trace::Shape(shape)) => grad_out.reshape(shape),
            (
                Layer::Residual { body, shortcut },
                Trace::Residual {
                    body: body_traces,
                    shortcut: skip_trace,
                },
            ) => {
                let body_slots = body.iter().map(Layer::param_tensor_count).sum::<usize>();
                let (body_grads, skip_grads) = match grads {
                    Some(g) => {
                        let (a, b) = g.split_at_mut(body_slots);
                        (Some(a), Some(b))
                    }
                    None => (None, None),
                };
                let skip_dx = match (shortcut, skip_trace) {
                    (Some(s), Some(t)) => s.backward(t, grad_out.clone(), skip_grads)?,
                    (None, _) => grad_out.clone(),
                    (Some(_), None) => return Err(Error::internal("missing shortcut trace")),
                };
                let mut dx = backward_sequence(body, body_traces, grad_out, body_grads)?;
                dx.add_assign(&skip_dx)?;
                Ok(dx)
            }
            (Layer::Quantize { .. }, _) => Err(Error::config(
                "quantization layer is not differentiable; no gradient path through it",
            )),
            _ => Err(Error::internal("trace does not belong to this layer")),
        }
    }
}

/// Backward pass over a layer sequence.
pub(crate) fn backward_sequence(
    layers: &[Layer],
    traces: &[Trace],
    grad_out: Tensor,
    mut grads: Option<&mut [Tensor]>,
) -> Result<Tensor> {
    if layers.len() != traces.len() {
        return Err(Error::internal("trace length does not match layer count"));
    }
    let counts: Vec<usize> = layers.iter().map(Layer::param_tensor_count).collect();
    let mut end: usize = counts.iter().sum();
    let mut g = grad_out;
    for ((layer, trace), count) in layers.iter().zip(traces).zip(&counts).rev() {
        let start = end - count;
        let slots = grads.as_deref_mut().map(|all| &mut all[start..end]);
        g = layer.backward(trace, g, slots)?;
        end = start;
    }
    Ok(g)
}

/// Ordered layer stack mapping inputs to logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.layers.first().map(|l| l.forward(x)).transpose()?;
        for l in self.layers.iter().skip(1) {
            h = Some(l.forward(h.as_ref().expect("set above"))?);
        }
        Ok(h.unwrap_or_else(|| x.clone()))
    }

    pub fn forward_traced(&self, x: &Tensor) -> Result<(Tensor, Vec<Trace>)> {
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for l in &self.layers {
            let (next, t) = l.forward_traced(&h)?;
            traces.push(t);
            h = next;
        }
        Ok((h, traces))
    }

    pub fn backward(&self, traces: &[Trace], grad_logits: Tensor, grads: Option<&mut [Tensor]>) -> Result<Tensor> {
        backward_sequence(&self.layers, traces, grad_logits, grads)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.collect_params(&mut out);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            l.collect_params_mut(&mut out);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Zero tensors shaped like the parameters.
    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.params().iter().map(|t| Tensor::zeros(t.shape())).collect()
    }

    /// Which side of every ReLU hinge and max-pool selection the input lands
    /// on. Two inputs with equal patterns lie in the same smooth piece of the
    /// network.
    pub fn switching_pattern(&self, x: &Tensor) -> Result<Vec<usize>> {
        fn collect(trace: &Trace, out: &mut Vec<usize>) {
            match trace {
                Trace::Mask(m) => out.extend(m.iter().map(|&b| b as usize)),
                Trace::Pool { argmax, .. } => out.extend_from_slice(argmax),
                Trace::Residual { body, shortcut } => {
                    for t in body {
                        collect(t, out);
                    }
                    if let Some(t) = shortcut {
                        collect(t, out);
                    }
                }
                _ => {}
            }
        }
        let (_, traces) = self.forward_traced(x)?;
        let mut out = Vec::new();
        for t in &traces {
            collect(t, &mut out);
        }
        Ok(out)
    }
}
