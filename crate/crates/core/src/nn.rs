//! Small feed-forward network engine with exact backpropagation.
//!
//! Parameters of a network live in one flat vector laid out layer by layer,
//! weights before biases. Gradients use the same layout, which keeps the
//! optimizer, the checkpoint format and the finite-difference checker
//! layout-agnostic.
//!
//! Batched tensors are row-major: `[batch, features]` for dense stages and
//! `[batch, channels, length]` for convolutional stages.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Linear,
    /// `k·σ(z)`
    ScaledSigmoid(f64),
}

impl Activation {
    #[inline]
    fn apply(&self, z: f64) -> f64 {
        match *self {
            Activation::Relu => z.max(0.0),
            Activation::Linear => z,
            Activation::ScaledSigmoid(k) => k * sigmoid(z),
        }
    }

    #[inline]
    fn derivative(&self, z: f64) -> f64 {
        match *self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
            Activation::ScaledSigmoid(k) => {
                let s = sigmoid(z);
                k * s * (1.0 - s)
            }
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
        activation: Activation,
    },
    /// Stride 1, zero "same" padding; `kernel` must be odd.
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        activation: Activation,
    },
    MaxPool1d {
        width: usize,
    },
    AdaptiveAvgPool {
        target_len: usize,
    },
    Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputShape {
    Features(usize),
    /// Signals with a fixed channel count and any length.
    Signal { channels: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Flat(usize),
    Signal(usize, Option<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: InputShape,
    pub layers: Vec<Layer>,
}

impl NetworkSpec {
    /// Fully connected stack; hidden layers use ReLU.
    pub fn mlp(widths: &[usize], output: Activation) -> Self {
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| Layer::Dense {
                inputs: widths[i],
                outputs: widths[i + 1],
                activation: if i + 1 == n { output } else { Activation::Relu },
            })
            .collect();
        Self {
            input: InputShape::Features(widths[0]),
            layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Shape("network has no layers".into()));
        }
        let mut stage = match self.input {
            InputShape::Features(n) => Stage::Flat(n),
            InputShape::Signal { channels } => Stage::Signal(channels, None),
        };
        for (i, layer) in self.layers.iter().enumerate() {
            stage = match (layer, stage) {
                (Layer::Dense { inputs, outputs, .. }, Stage::Flat(n)) if *inputs == n => {
                    Stage::Flat(*outputs)
                }
                (
                    Layer::Conv1d {
                        in_channels,
                        out_channels,
                        kernel,
                        ..
                    },
                    Stage::Signal(c, len),
                ) if *in_channels == c && kernel % 2 == 1 => Stage::Signal(*out_channels, len),
                (Layer::MaxPool1d { width }, Stage::Signal(c, len)) if *width >= 1 => {
                    Stage::Signal(c, len.map(|l| l / width))
                }
                (Layer::AdaptiveAvgPool { target_len }, Stage::Signal(c, _)) if *target_len >= 1 => {
                    Stage::Signal(c, Some(*target_len))
                }
                (Layer::Flatten, Stage::Signal(c, Some(len))) => Stage::Flat(c * len),
                (layer, stage) => {
                    return Err(Error::Shape(format!(
                        "layer {i} ({layer:?}) incompatible with incoming {stage:?}"
                    )))
                }
            };
        }
        match stage {
            Stage::Flat(_) => Ok(()),
            s => Err(Error::Shape(format!("network must end in a flat output, got {s:?}"))),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Dense { outputs, .. } => Some(*outputs),
                _ => None,
            })
            .unwrap_or(0)
    }

    /// (weight shape, bias length) for every layer, `None` for parameter-free ones.
    pub fn param_shapes(&self) -> Vec<Option<(Vec<usize>, usize)>> {
        self.layers
            .iter()
            .map(|l| match *l {
                Layer::Dense {
                    inputs, outputs, ..
                } => Some((vec![inputs, outputs], outputs)),
                Layer::Conv1d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => Some((vec![out_channels, in_channels, kernel], out_channels)),
                _ => None,
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.param_shapes()
            .into_iter()
            .flatten()
            .map(|(w, b)| w.iter().product::<usize>() + b)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} does not match {} values",
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
        }
    }

    /// `[rows.len(), width]` matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let width = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * width);
        for r in rows {
            if r.as_ref().len() != width {
                return Err(Error::Shape("ragged rows".into()));
            }
            values.extend_from_slice(r.as_ref());
        }
        Self::new(vec![rows.len(), width], values)
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.values.len() / self.shape[0];
        &self.values[i * w..(i + 1) * w]
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ParamSlot {
    weight: Range<usize>,
    bias: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    pub values: Vec<f64>,
    slots: Vec<Option<ParamSlot>>,
    version: u64,
}

impl NetworkWeights {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let mut offset = 0;
        let slots = spec
            .param_shapes()
            .into_iter()
            .map(|shape| {
                shape.map(|(w, b)| {
                    let nw: usize = w.iter().product();
                    let slot = ParamSlot {
                        weight: offset..offset + nw,
                        bias: offset + nw..offset + nw + b,
                    };
                    offset += nw + b;
                    slot
                })
            })
            .collect();
        Self {
            values: vec![0.0; offset],
            slots,
            version: 0,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: &NetworkSpec, rng: &mut RngStream) -> Self {
        let mut w = Self::zeros(spec);
        for (layer, slot) in spec.layers.iter().zip(w.slots.clone()) {
            let Some(slot) = slot else { continue };
            let (fan_in, fan_out) = match *layer {
                Layer::Dense {
                    inputs, outputs, ..
                } => (inputs, outputs),
                Layer::Conv1d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => (in_channels * kernel, out_channels * kernel),
                _ => unreachable!("parameter slot on a parameter-free layer"),
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut w.values[slot.weight] {
                *v = rng.uniform(-limit, limit);
            }
        }
        w
    }

    pub fn from_values(spec: &NetworkSpec, values: Vec<f64>) -> Result<Self> {
        let mut w = Self::zeros(spec);
        if values.len() != w.values.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                w.values.len(),
                values.len()
            )));
        }
        w.values = values;
        Ok(w)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Marks the weights as modified; caches from earlier forward passes become stale.
    pub fn touch(&mut self) {
        self.version += 1;
    }

    pub fn layer_weight(&self, layer: usize) -> Option<&[f64]> {
        self.slots[layer].as_ref().map(|s| &self.values[s.weight.clone()])
    }

    pub fn layer_bias(&self, layer: usize) -> Option<&[f64]> {
        self.slots[layer].as_ref().map(|s| &self.values[s.bias.clone()])
    }

    pub fn layer_weight_mut(&mut self, layer: usize) -> Option<&mut [f64]> {
        self.version += 1;
        let slot = self.slots[layer].clone()?;
        Some(&mut self.values[slot.weight])
    }

    pub fn layer_bias_mut(&mut self, layer: usize) -> Option<&mut [f64]> {
        self.version += 1;
        let slot = self.slots[layer].clone()?;
        Some(&mut self.values[slot.bias])
    }
}

#[derive(Debug, Clone)]
enum LayerCache {
    Dense { input: Tensor, pre: Vec<f64>, relu: bool },
    Conv { input: Tensor, pre: Vec<f64>, relu: bool },
    MaxPool { input_shape: Vec<usize>, argmax: Vec<usize> },
    AvgPool { input_shape: Vec<usize> },
    Flatten { input_shape: Vec<usize> },
}

/// Intermediate values recorded by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct Cache {
    version: u64,
    layers: Vec<LayerCache>,
}

impl Cache {
    /// True when every ReLU gate and max-pool selection agrees with `other`.
    pub fn same_pattern(&self, other: &Cache) -> bool {
        self.layers.iter().zip(&other.layers).all(|(a, b)| match (a, b) {
            (LayerCache::Dense { pre: p, relu: true, .. }, LayerCache::Dense { pre: q, .. })
            | (LayerCache::Conv { pre: p, relu: true, .. }, LayerCache::Conv { pre: q, .. }) => {
                p.iter().zip(q).all(|(x, y)| (*x > 0.0) == (*y > 0.0))
            }
            (LayerCache::MaxPool { argmax: p, .. }, LayerCache::MaxPool { argmax: q, .. }) => p == q,
            _ => true,
        })
    }
}

/// `c[m×n] = a[m×k]·b[k×n] + beta·c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= if m * k == 0 { 0 } else { (m - 1) * rsa + (k - 1) * csa + 1 });
    debug_assert!(c.len() >= (m - 1) * rsc + (n - 1) * csc + 1);
    // SAFETY: the slices cover every strided element touched for the given
    // dimensions (checked above in debug builds) and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn check_input(spec: &NetworkSpec, input: &Tensor) -> Result<()> {
    let ok = match spec.input {
        InputShape::Features(n) => input.shape.len() == 2 && input.shape[1] == n,
        InputShape::Signal { channels } => {
            input.shape.len() == 3 && input.shape[1] == channels && input.shape[2] >= 1
        }
    };
    if ok && input.values.len() == input.shape.iter().product::<usize>() {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "input shape {:?} does not match network input {:?}",
            input.shape, spec.input
        )))
    }
}

/// im2col for a batch: rows `c·k + j`, columns `n·len + l`.
fn im2col(x: &[f64], batch: usize, channels: usize, len: usize, kernel: usize) -> Vec<f64> {
    let pad = kernel / 2;
    let cols_n = batch * len;
    let mut cols = vec![0.0; channels * kernel * cols_n];
    for c in 0..channels {
        for j in 0..kernel {
            let row = &mut cols[(c * kernel + j) * cols_n..(c * kernel + j + 1) * cols_n];
            for n in 0..batch {
                let src = &x[(n * channels + c) * len..(n * channels + c + 1) * len];
                let dst = &mut row[n * len..(n + 1) * len];
                for l in 0..len {
                    let s = l as isize + j as isize - pad as isize;
                    if s >= 0 && (s as usize) < len {
                        dst[l] = src[s as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], batch: usize, channels: usize, len: usize, kernel: usize) -> Vec<f64> {
    let pad = kernel / 2;
    let cols_n = batch * len;
    let mut x = vec![0.0; batch * channels * len];
    for c in 0..channels {
        for j in 0..kernel {
            let row = &cols[(c * kernel + j) * cols_n..(c * kernel + j + 1) * cols_n];
            for n in 0..batch {
                let dst = &mut x[(n * channels + c) * len..(n * channels + c + 1) * len];
                let src = &row[n * len..(n + 1) * len];
                for l in 0..len {
                    let s = l as isize + j as isize - pad as isize;
                    if s >= 0 && (s as usize) < len {
                        dst[s as usize] += src[l];
                    }
                }
            }
        }
    }
    x
}

fn adaptive_bounds(len: usize, target: usize, i: usize) -> (usize, usize) {
    let start = (i * len) / target;
    let end = ((i + 1) * len).div_ceil(target);
    (start, end.max(start + 1))
}

fn run_forward(
    spec: &NetworkSpec,
    weights: &NetworkWeights,
    input: &Tensor,
    keep_cache: bool,
) -> Result<(Tensor, Vec<LayerCache>)> {
    check_input(spec, input)?;
    let mut x = input.clone();
    let mut caches = Vec::with_capacity(if keep_cache { spec.layers.len() } else { 0 });
    for (li, layer) in spec.layers.iter().enumerate() {
        let batch = x.batch();
        match *layer {
            Layer::Dense {
                inputs,
                outputs,
                activation,
            } => {
                if x.shape != [batch, inputs] {
                    return Err(Error::Shape(format!(
                        "dense layer {li} expects [_, {inputs}], got {:?}",
                        x.shape
                    )));
                }
                let w = weights.layer_weight(li).expect("dense layer has weights");
                let b = weights.layer_bias(li).expect("dense layer has bias");
                let mut pre = Vec::with_capacity(batch * outputs);
                for _ in 0..batch {
                    pre.extend_from_slice(b);
                }
                gemm(
                    batch,
                    inputs,
                    outputs,
                    &x.values,
                    (inputs, 1),
                    w,
                    (outputs, 1),
                    1.0,
                    &mut pre,
                    (outputs, 1),
                );
                let out: Vec<f64> = pre.iter().map(|&z| activation.apply(z)).collect();
                let next = Tensor {
                    shape: vec![batch, outputs],
                    values: out,
                };
                if keep_cache {
                    caches.push(LayerCache::Dense {
                        input: x,
                        pre,
                        relu: activation == Activation::Relu,
                    });
                }
                x = next;
            }
            Layer::Conv1d {
                in_channels,
                out_channels,
                kernel,
                activation,
            } => {
                if x.shape.len() != 3 || x.shape[1] != in_channels {
                    return Err(Error::Shape(format!(
                        "conv layer {li} expects [_, {in_channels}, _], got {:?}",
                        x.shape
                    )));
                }
                let len = x.shape[2];
                let w = weights.layer_weight(li).expect("conv layer has weights");
                let b = weights.layer_bias(li).expect("conv layer has bias");
                let cols = im2col(&x.values, batch, in_channels, len, kernel);
                let cols_n = batch * len;
                let ck = in_channels * kernel;
                // out[o, n·len + l] = Σ W[o, ck]·cols[ck, n·len + l]
                let mut tmp = vec![0.0; out_channels * cols_n];
                for o in 0..out_channels {
                    tmp[o * cols_n..(o + 1) * cols_n].fill(b[o]);
                }
                gemm(
                    out_channels,
                    ck,
                    cols_n,
                    w,
                    (ck, 1),
                    &cols,
                    (cols_n, 1),
                    1.0,
                    &mut tmp,
                    (cols_n, 1),
                );
                let mut pre = vec![0.0; batch * out_channels * len];
                for o in 0..out_channels {
                    for n in 0..batch {
                        pre[(n * out_channels + o) * len..(n * out_channels + o + 1) * len]
                            .copy_from_slice(&tmp[o * cols_n + n * len..o * cols_n + (n + 1) * len]);
                    }
                }
                let out: Vec<f64> = pre.iter().map(|&z| activation.apply(z)).collect();
                let next = Tensor {
                    shape: vec![batch, out_channels, len],
                    values: out,
                };
                if keep_cache {
                    caches.push(LayerCache::Conv {
                        input: x,
                        pre,
                        relu: activation == Activation::Relu,
                    });
                }
                x = next;
            }
            Layer::MaxPool1d { width } => {
                let (c, len) = signal_dims(&x, li)?;
                let out_len = len / width;
                if out_len == 0 {
                    return Err(Error::Shape(format!(
                        "max-pool layer {li}: signal of length {len} shorter than width {width}"
                    )));
                }
                let mut out = Vec::with_capacity(batch * c * out_len);
                let mut argmax = Vec::with_capacity(batch * c * out_len);
                for row in 0..batch * c {
                    let src = &x.values[row * len..(row + 1) * len];
                    for i in 0..out_len {
                        let mut best = i * width;
                        for j in i * width + 1..(i + 1) * width {
                            if src[j] > src[best] {
                                best = j;
                            }
                        }
                        out.push(src[best]);
                        argmax.push(row * len + best);
                    }
                }
                let next = Tensor {
                    shape: vec![batch, c, out_len],
                    values: out,
                };
                if keep_cache {
                    caches.push(LayerCache::MaxPool {
                        input_shape: x.shape.clone(),
                        argmax,
                    });
                }
                x = next;
            }
            Layer::AdaptiveAvgPool { target_len } => {
                let (c, len) = signal_dims(&x, li)?;
                let mut out = Vec::with_capacity(batch * c * target_len);
                for row in 0..batch * c {
                    let src = &x.values[row * len..(row + 1) * len];
                    for i in 0..target_len {
                        let (s, e) = adaptive_bounds(len, target_len, i);
                        out.push(src[s..e].iter().sum::<f64>() / (e - s) as f64);
                    }
                }
                let next = Tensor {
                    shape: vec![batch, c, target_len],
                    values: out,
                };
                if keep_cache {
                    caches.push(LayerCache::AvgPool {
                        input_shape: x.shape.clone(),
                    });
                }
                x = next;
            }
            Layer::Flatten => {
                let (c, len) = signal_dims(&x, li)?;
                let input_shape = x.shape.clone();
                x.shape = vec![batch, c * len];
                if keep_cache {
                    caches.push(LayerCache::Flatten { input_shape });
                }
            }
        }
    }
    Ok((x, caches))
}

fn signal_dims(x: &Tensor, li: usize) -> Result<(usize, usize)> {
    if x.shape.len() != 3 {
        return Err(Error::Shape(format!(
            "layer {li} expects a [batch, channels, length] signal, got {:?}",
            x.shape
        )));
    }
    Ok((x.shape[1], x.shape[2]))
}

/// Runs the network and records what [`backward`] needs.
pub fn forward(spec: &NetworkSpec, weights: &NetworkWeights, input: &Tensor) -> Result<(Tensor, Cache)> {
    let (out, layers) = run_forward(spec, weights, input, true)?;
    Ok((
        out,
        Cache {
            version: weights.version,
            layers,
        },
    ))
}

/// Forward pass without recording a cache.
pub fn predict(spec: &NetworkSpec, weights: &NetworkWeights, input: &Tensor) -> Result<Tensor> {
    Ok(run_forward(spec, weights, input, false)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Same layout as [`NetworkWeights::values`]; empty when not requested.
    pub weights: Vec<f64>,
    pub input: Tensor,
}

/// Backpropagates `output_grad` (∂loss/∂output) through the cached pass.
pub fn backward(
    spec: &NetworkSpec,
    weights: &NetworkWeights,
    cache: &Cache,
    output_grad: &Tensor,
) -> Result<Gradients> {
    backward_impl(spec, weights, cache, output_grad, true)
}

/// Like [`backward`] but skips parameter gradients.
pub fn input_gradient(
    spec: &NetworkSpec,
    weights: &NetworkWeights,
    cache: &Cache,
    output_grad: &Tensor,
) -> Result<Tensor> {
    Ok(backward_impl(spec, weights, cache, output_grad, false)?.input)
}

fn backward_impl(
    spec: &NetworkSpec,
    weights: &NetworkWeights,
    cache: &Cache,
    output_grad: &Tensor,
    want_weights: bool,
) -> Result<Gradients> {
    if cache.version != weights.version || cache.layers.len() != spec.layers.len() {
        return Err(Error::StaleCache {
            cached: cache.version,
            current: weights.version,
        });
    }
    let mut grads = if want_weights {
        vec![0.0; weights.values.len()]
    } else {
        Vec::new()
    };
    let mut g = output_grad.clone();
    for (li, (layer, lc)) in spec.layers.iter().zip(&cache.layers).enumerate().rev() {
        match (layer, lc) {
            (
                Layer::Dense {
                    inputs,
                    outputs,
                    activation,
                },
                LayerCache::Dense { input, pre, .. },
            ) => {
                let (inputs, outputs) = (*inputs, *outputs);
                let batch = input.batch();
                if g.values.len() != batch * outputs {
                    return Err(Error::Shape(format!(
                        "gradient shape {:?} does not match dense layer {li} output [{batch}, {outputs}]",
                        g.shape
                    )));
                }
                let dz: Vec<f64> = g
                    .values
                    .iter()
                    .zip(pre)
                    .map(|(&gy, &z)| gy * activation.derivative(z))
                    .collect();
                let slot = weights.slots[li].as_ref().expect("dense slot");
                if want_weights {
                    // dW = xᵀ·dz
                    gemm(
                        inputs,
                        batch,
                        outputs,
                        &input.values,
                        (1, inputs),
                        &dz,
                        (outputs, 1),
                        0.0,
                        &mut grads[slot.weight.clone()],
                        (outputs, 1),
                    );
                    let db = &mut grads[slot.bias.clone()];
                    for n in 0..batch {
                        for (o, d) in db.iter_mut().enumerate() {
                            *d += dz[n * outputs + o];
                        }
                    }
                }
                // dx = dz·Wᵀ
                let w = &weights.values[slot.weight.clone()];
                let mut dx = vec![0.0; batch * inputs];
                gemm(
                    batch,
                    outputs,
                    inputs,
                    &dz,
                    (outputs, 1),
                    w,
                    (1, outputs),
                    0.0,
                    &mut dx,
                    (inputs, 1),
                );
                g = Tensor {
                    shape: vec![batch, inputs],
                    values: dx,
                };
            }
            (
                Layer::Conv1d {
                    in_channels,
                    out_channels,
                    kernel,
                    activation,
                },
                LayerCache::Conv { input, pre, .. },
            ) => {
                let (ic, oc, k) = (*in_channels, *out_channels, *kernel);
                let batch = input.batch();
                let len = input.shape[2];
                if g.values.len() != batch * oc * len {
                    return Err(Error::Shape(format!(
                        "gradient shape {:?} does not match conv layer {li} output",
                        g.shape
                    )));
                }
                let cols_n = batch * len;
                let ck = ic * k;
                // dz laid out [o, n·len + l]
                let mut dz = vec![0.0; oc * cols_n];
                for n in 0..batch {
                    for o in 0..oc {
                        let base = (n * oc + o) * len;
                        for l in 0..len {
                            dz[o * cols_n + n * len + l] =
                                g.values[base + l] * activation.derivative(pre[base + l]);
                        }
                    }
                }
                let slot = weights.slots[li].as_ref().expect("conv slot");
                if want_weights {
                    let cols = im2col(&input.values, batch, ic, len, k);
                    gemm(
                        oc,
                        cols_n,
                        ck,
                        &dz,
                        (cols_n, 1),
                        &cols,
                        (1, cols_n),
                        0.0,
                        &mut grads[slot.weight.clone()],
                        (ck, 1),
                    );
                    let db = &mut grads[slot.bias.clone()];
                    for (o, d) in db.iter_mut().enumerate() {
                        *d = dz[o * cols_n..(o + 1) * cols_n].iter().sum();
                    }
                }
                let w = &weights.values[slot.weight.clone()];
                let mut dcols = vec![0.0; ck * cols_n];
                gemm(
                    ck,
                    oc,
                    cols_n,
                    w,
                    (1, ck),
                    &dz,
                    (cols_n, 1),
                    0.0,
                    &mut dcols,
                    (cols_n, 1),
                );
                g = Tensor {
                    shape: vec![batch, ic, len],
                    values: col2im(&dcols, batch, ic, len, k),
                };
            }
            (Layer::MaxPool1d { .. }, LayerCache::MaxPool { input_shape, argmax }) => {
                let mut dx = vec![0.0; input_shape.iter().product()];
                for (gv, &idx) in g.values.iter().zip(argmax) {
                    dx[idx] += gv;
                }
                g = Tensor {
                    shape: input_shape.clone(),
                    values: dx,
                };
            }
            (Layer::AdaptiveAvgPool { target_len }, LayerCache::AvgPool { input_shape }) => {
                let len = input_shape[2];
                let rows = input_shape[0] * input_shape[1];
                let mut dx = vec![0.0; rows * len];
                for row in 0..rows {
                    for i in 0..*target_len {
                        let (s, e) = adaptive_bounds(len, *target_len, i);
                        let share = g.values[row * target_len + i] / (e - s) as f64;
                        for d in &mut dx[row * len + s..row * len + e] {
                            *d += share;
                        }
                    }
                }
                g = Tensor {
                    shape: input_shape.clone(),
                    values: dx,
                };
            }
            (Layer::Flatten, LayerCache::Flatten { input_shape }) => {
                g.shape = input_shape.clone();
            }
            _ => {
                return Err(Error::StaleCache {
                    cached: cache.version,
                    current: weights.version,
                })
            }
        }
    }
    Ok(Gradients {
        weights: grads,
        input: g,
    })
}

/// Mean squared error over all outputs and its gradient w.r.t. the outputs.
pub fn mse_loss(output: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if output.values.len() != target.values.len() {
        return Err(Error::Shape(format!(
            "output {:?} vs target {:?}",
            output.shape, target.shape
        )));
    }
    let n = output.values.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(output.values.len());
    for (o, t) in output.values.iter().zip(&target.values) {
        let d = o - t;
        loss += d * d;
        grad.push(2.0 * d / n);
    }
    Ok((
        loss / n,
        Tensor {
            shape: output.shape.clone(),
            values: grad,
        },
    ))
}

/// Adaptive-moment optimizer over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training("non-finite gradient".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Applies one Adam update to a network and invalidates its caches.
pub fn optimizer_step(opt: &mut Adam, weights: &mut NetworkWeights, grads: &[f64]) -> Result<()> {
    opt.step(&mut weights.values, grads)?;
    weights.touch();
    Ok(())
}

/// `n_draws` indices drawn uniformly with replacement from `0..buffer_size`.
pub fn bootstrap_sample(buffer_size: usize, n_draws: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    if buffer_size == 0 {
        return Err(Error::Domain("cannot bootstrap from an empty buffer".into()));
    }
    Ok((0..n_draws).map(|_| rng.index(buffer_size)).collect())
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many parameters (chosen at random); `None` checks all.
    pub max_params: Option<usize>,
    pub seed: u64,
    /// Floor on the denominator of the relative error.
    pub scale_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_params: None,
            seed: 0,
            scale_floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub weight_rel_errors: Vec<(usize, f64)>,
    pub input_rel_errors: Vec<(usize, f64)>,
    /// Entries skipped because the perturbation flipped a ReLU gate or pooling choice.
    pub skipped_at_kinks: usize,
    pub tolerance: f64,
    pub max_weight_rel: f64,
    pub max_input_rel: f64,
    pub passed: bool,
}

fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares analytic gradients of `loss = Σ outputs` against central
/// differences, both for parameters and for inputs.
pub fn grad_check(
    spec: &NetworkSpec,
    weights: &NetworkWeights,
    input: &Tensor,
    tolerance: f64,
    options: GradCheckOptions,
) -> Result<GradCheckReport> {
    let (out, cache) = forward(spec, weights, input)?;
    let ones = Tensor {
        shape: out.shape.clone(),
        values: vec![1.0; out.values.len()],
    };
    let analytic = backward(spec, weights, &cache, &ones)?;
    grad_check_against(spec, weights, input, &analytic, tolerance, options)
}

/// Same as [`grad_check`] but with caller-supplied analytic gradients.
pub fn grad_check_against(
    spec: &NetworkSpec,
    weights: &NetworkWeights,
    input: &Tensor,
    analytic: &Gradients,
    tolerance: f64,
    options: GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, base_cache) = forward(spec, weights, input)?;
    let h = options.step;
    let mut skipped = 0;

    let eval = |w: &NetworkWeights, x: &Tensor| -> Result<(f64, Cache)> {
        let (o, c) = forward(spec, w, x)?;
        Ok((o.values.iter().sum(), c))
    };

    let param_indices: Vec<usize> = match options.max_params {
        Some(m) if m < weights.len() => {
            let mut rng = RngStream::new(options.seed, 7);
            (0..m).map(|_| rng.index(weights.len())).collect()
        }
        _ => (0..weights.len()).collect(),
    };

    let mut weight_rel_errors = Vec::with_capacity(param_indices.len());
    let mut w = weights.clone();
    for &i in &param_indices {
        let orig = w.values[i];
        w.values[i] = orig + h;
        let (fp, cp) = eval(&w, input)?;
        w.values[i] = orig - h;
        let (fm, cm) = eval(&w, input)?;
        w.values[i] = orig;
        if !cp.same_pattern(&base_cache) || !cm.same_pattern(&base_cache) {
            skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        weight_rel_errors.push((i, rel_error(analytic.weights[i], numeric, options.scale_floor)));
    }

    let mut input_rel_errors = Vec::with_capacity(input.values.len());
    let mut x = input.clone();
    for i in 0..input.values.len() {
        let orig = x.values[i];
        x.values[i] = orig + h;
        let (fp, cp) = eval(weights, &x)?;
        x.values[i] = orig - h;
        let (fm, cm) = eval(weights, &x)?;
        x.values[i] = orig;
        if !cp.same_pattern(&base_cache) || !cm.same_pattern(&base_cache) {
            skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        input_rel_errors.push((i, rel_error(analytic.input.values[i], numeric, options.scale_floor)));
    }

    let max_weight_rel = weight_rel_errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let max_input_rel = input_rel_errors.iter().map(|e| e.1).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_weight_rel < tolerance && max_input_rel < tolerance,
        weight_rel_errors,
        input_rel_errors,
        skipped_at_kinks: skipped,
        tolerance,
        max_weight_rel,
        max_input_rel,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: NetworkSpec,
    pub layer_shapes: Vec<Option<(Vec<usize>, usize)>>,
    pub precision: String,
    pub seed: u64,
}

/// Writes `<stem>.json` (metadata) and `<stem>.bin` (little-endian f64
/// parameters, layer order, weights before biases).
pub fn save_checkpoint(
    stem: impl AsRef<Path>,
    spec: &NetworkSpec,
    weights: &NetworkWeights,
    seed: u64,
) -> Result<()> {
    let stem = stem.as_ref();
    let meta = CheckpointMeta {
        spec: spec.clone(),
        layer_shapes: spec.param_shapes(),
        precision: "f64".into(),
        seed,
    };
    let json_path = stem.with_extension("json");
    let bin_path = stem.with_extension("bin");
    let text = serde_json::to_string_pretty(&meta).expect("checkpoint metadata serializes");
    std::fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;
    let bytes: Vec<u8> = weights.values.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))
}

pub fn load_checkpoint(stem: impl AsRef<Path>) -> Result<(NetworkSpec, NetworkWeights, u64)> {
    let stem = stem.as_ref();
    let json_path = stem.with_extension("json");
    let bin_path = stem.with_extension("bin");
    let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::parse(&json_path, e))?;
    if meta.precision != "f64" {
        return Err(Error::parse(&json_path, format!("unsupported precision {}", meta.precision)));
    }
    meta.spec.validate()?;
    let bytes = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::parse(&bin_path, "length is not a multiple of 8"));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let weights = NetworkWeights::from_values(&meta.spec, values)?;
    Ok((meta.spec, weights, meta.seed))
}
