//! Layered feed-forward networks with cached forward passes and mask-aware
//! backward passes.
//!
//! Activations are carried as flat row-major buffers of `batch × features`.
//! Per-sample shapes are `[features]` for dense layers and `[channels, height,
//! width]` for convolution and pooling.
//!
//! `backward` only walks down to the shallowest layer whose mask bit is set.
//! Layers below it receive neither a parameter gradient nor an error signal,
//! which is where partial training saves its compute.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::BpMask;
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Dense {
        input: usize,
        output: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        window: usize,
    },
    Relu,
    Flatten,
    /// Multiplies activations by a constant (dropout rescaling).
    Scale {
        factor: f64,
    },
    SoftmaxXent {
        classes: usize,
    },
}

impl Layer {
    pub fn is_trainable(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv2d { .. })
    }

    fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let err = |message: String| Error::LayerShape {
            layer: index,
            message,
        };
        match *self {
            Layer::Dense {
                input: n_in,
                output,
            } => {
                if input != [n_in] {
                    return Err(err(format!("dense expects [{n_in}], got {input:?}")));
                }
                Ok(vec![output])
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = input else {
                    return Err(err(format!("conv expects [C, H, W], got {input:?}")));
                };
                if *c != in_channels {
                    return Err(err(format!("conv expects {in_channels} channels, got {c}")));
                }
                if stride == 0 || kernel == 0 {
                    return Err(err("conv kernel and stride must be positive".into()));
                }
                let out_dim = |s: usize| {
                    (s + 2 * padding)
                        .checked_sub(kernel)
                        .map(|span| span / stride + 1)
                };
                match (out_dim(*h), out_dim(*w)) {
                    (Some(oh), Some(ow)) => Ok(vec![out_channels, oh, ow]),
                    _ => Err(err(format!("kernel {kernel} larger than padded input {input:?}"))),
                }
            }
            Layer::MaxPool2d { window } => {
                let [c, h, w] = input else {
                    return Err(err(format!("pool expects [C, H, W], got {input:?}")));
                };
                if window == 0 || *h < window || *w < window {
                    return Err(err(format!("pool window {window} does not fit {input:?}")));
                }
                Ok(vec![*c, h / window, w / window])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::Scale { factor } => {
                if !(factor.is_finite() && factor > 0.0) {
                    return Err(err(format!("scale factor must be positive, got {factor}")));
                }
                Ok(input.to_vec())
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::SoftmaxXent { classes } => {
                if input != [classes] {
                    return Err(err(format!("softmax expects [{classes}], got {input:?}")));
                }
                Ok(vec![classes])
            }
        }
    }
}

/// Architecture description: per-sample input shape plus an ordered layer list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct ModelSpec {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    /// `shapes[j]` is the per-sample input shape of layer `j`; one extra entry
    /// for the network output.
    shapes: Vec<Vec<usize>>,
    /// Layer indices of the trainable layers, shallow to deep.
    trainable: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct RawSpec {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

impl TryFrom<RawSpec> for ModelSpec {
    type Error = Error;
    fn try_from(raw: RawSpec) -> Result<Self> {
        ModelSpec::new(raw.input_shape, raw.layers)
    }
}

impl From<ModelSpec> for RawSpec {
    fn from(spec: ModelSpec) -> Self {
        RawSpec {
            input_shape: spec.input_shape,
            layers: spec.layers,
        }
    }
}

impl ModelSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Shape(format!("bad input shape {input_shape:?}")));
        }
        let softmax_at: Vec<usize> = layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::SoftmaxXent { .. }))
            .map(|(i, _)| i)
            .collect();
        if softmax_at.len() != 1 || softmax_at[0] + 1 != layers.len() {
            return Err(Error::Shape(
                "model needs exactly one SoftmaxXent, as the final layer".into(),
            ));
        }
        let mut shapes = vec![input_shape.clone()];
        for (j, layer) in layers.iter().enumerate() {
            let next = layer.output_shape(j, &shapes[j])?;
            shapes.push(next);
        }
        let trainable: Vec<usize> = layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_trainable())
            .map(|(i, _)| i)
            .collect();
        if trainable.is_empty() {
            return Err(Error::Shape("model has no trainable layers".into()));
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
            trainable,
        })
    }

    /// Fully connected network `sizes[0] → … → sizes[last]`, ReLU after every
    /// hidden layer, softmax cross-entropy on top.
    pub fn fcnn(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::InvalidArgument(
                "an FCNN needs at least input and output sizes".into(),
            ));
        }
        let mut layers = Vec::new();
        for (j, pair) in sizes.windows(2).enumerate() {
            layers.push(Layer::Dense {
                input: pair[0],
                output: pair[1],
            });
            if j + 2 < sizes.len() {
                layers.push(Layer::Relu);
            }
        }
        layers.push(Layer::SoftmaxXent {
            classes: sizes[sizes.len() - 1],
        });
        Self::new(vec![sizes[0]], layers)
    }

    /// 784-400-300-200-100-10.
    pub fn fcnn_mnist() -> Self {
        Self::fcnn(&[784, 400, 300, 200, 100, 10]).expect("valid architecture")
    }

    /// Two 5×5 conv/pool stages (8 and 16 filters) then 256-128-10.
    pub fn cnn_mnist() -> Self {
        Self::small_cnn([1, 28, 28], [8, 16], &[256, 128, 10])
    }

    /// Two 5×5 conv/pool stages (16 and 32 filters) then 800-500-300-10.
    pub fn cnn_cifar10() -> Self {
        Self::small_cnn([3, 32, 32], [16, 32], &[800, 500, 300, 10])
    }

    fn small_cnn(input: [usize; 3], filters: [usize; 2], dense: &[usize]) -> Self {
        let mut layers = vec![
            conv(input[0], filters[0]),
            Layer::Relu,
            Layer::MaxPool2d { window: 2 },
            conv(filters[0], filters[1]),
            Layer::Relu,
            Layer::MaxPool2d { window: 2 },
            Layer::Flatten,
        ];
        for (j, pair) in dense.windows(2).enumerate() {
            layers.push(Layer::Dense {
                input: pair[0],
                output: pair[1],
            });
            if j + 2 < dense.len() {
                layers.push(Layer::Relu);
            }
        }
        layers.push(Layer::SoftmaxXent {
            classes: dense[dense.len() - 1],
        });
        Self::new(input.to_vec(), layers).expect("valid architecture")
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Per-sample input shape of layer `j` (`j == layers().len()` gives the output).
    pub fn shape_at(&self, j: usize) -> &[usize] {
        &self.shapes[j]
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable.len()
    }

    /// Layer index of the `l`-th trainable layer.
    pub fn trainable_layer(&self, l: usize) -> usize {
        self.trainable[l]
    }

    pub fn trainable_layers(&self) -> &[usize] {
        &self.trainable
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(Layer::SoftmaxXent { classes }) => *classes,
            _ => unreachable!("validated in constructor"),
        }
    }

    /// Weight and bias shapes of trainable layer `l`.
    pub fn block_shapes(&self, l: usize) -> (Vec<usize>, Vec<usize>) {
        match self.layers[self.trainable[l]] {
            Layer::Dense { input, output } => (vec![output, input], vec![output]),
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            ),
            _ => unreachable!("trainable layers are dense or conv"),
        }
    }
}

fn conv(in_channels: usize, out_channels: usize) -> Layer {
    Layer::Conv2d {
        in_channels,
        out_channels,
        kernel: 5,
        stride: 1,
        padding: 0,
    }
}

/// Weight and bias of one trainable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ParamBlock {
    pub fn zeros_like(other: &ParamBlock) -> Self {
        Self {
            weight: Tensor::zeros(other.weight.shape().to_vec()),
            bias: Tensor::zeros(other.bias.shape().to_vec()),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.weight.scale(factor);
        self.bias.scale(factor);
    }

    pub fn axpy(&mut self, factor: f64, other: &ParamBlock) -> Result<()> {
        self.weight.axpy(factor, &other.weight)?;
        self.bias.axpy(factor, &other.bias)
    }

    pub fn is_all_zero(&self) -> bool {
        self.weight.is_all_zero() && self.bias.is_all_zero()
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_layout(&self, other: &ParamBlock) -> bool {
        self.weight.shape() == other.weight.shape() && self.bias.shape() == other.bias.shape()
    }
}

/// Trainable parameters, one block per trainable layer, shallow to deep.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub blocks: Vec<ParamBlock>,
}

impl LayerParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = (0..spec.trainable_count())
            .map(|l| {
                let (w_shape, b_shape) = spec.block_shapes(l);
                let (fan_in, fan_out) = match spec.layers[spec.trainable[l]] {
                    Layer::Dense { input, output } => (input, output),
                    Layer::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        ..
                    } => (in_channels * kernel * kernel, out_channels * kernel * kernel),
                    _ => unreachable!(),
                };
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit);
                let mut weight = Tensor::zeros(w_shape);
                for w in weight.data_mut() {
                    *w = dist.sample(&mut rng);
                }
                ParamBlock {
                    weight,
                    bias: Tensor::zeros(b_shape),
                }
            })
            .collect();
        Self { blocks }
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        let blocks = (0..spec.trainable_count())
            .map(|l| {
                let (w, b) = spec.block_shapes(l);
                ParamBlock {
                    weight: Tensor::zeros(w),
                    bias: Tensor::zeros(b),
                }
            })
            .collect();
        Self { blocks }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(ParamBlock::len).sum()
    }

    pub fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        if self.blocks.len() != spec.trainable_count() {
            return Err(Error::Shape(format!(
                "{} parameter blocks for {} trainable layers",
                self.blocks.len(),
                spec.trainable_count()
            )));
        }
        for (l, block) in self.blocks.iter().enumerate() {
            let (w, b) = spec.block_shapes(l);
            if block.weight.shape() != w.as_slice() || block.bias.shape() != b.as_slice() {
                return Err(Error::LayerShape {
                    layer: spec.trainable[l],
                    message: format!(
                        "parameter block has shapes {:?}/{:?}, expected {w:?}/{b:?}",
                        block.weight.shape(),
                        block.bias.shape()
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn same_layout(&self, other: &LayerParams) -> bool {
        self.blocks.len() == other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|(a, b)| a.same_layout(b))
    }

    pub fn is_finite(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| b.weight.is_finite() && b.bias.is_finite())
    }
}

/// Per-layer gradients (or accumulated deltas) with the layers that were updated.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub blocks: Vec<ParamBlock>,
    pub updated: Vec<bool>,
}

impl LayerGrads {
    pub fn zeros_like(params: &LayerParams) -> Self {
        Self {
            blocks: params.blocks.iter().map(ParamBlock::zeros_like).collect(),
            updated: vec![false; params.blocks.len()],
        }
    }

    pub fn as_params(&self) -> LayerParams {
        LayerParams {
            blocks: self.blocks.clone(),
        }
    }
}

/// State recorded by `forward` for a later `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    /// Input buffer of every layer below the softmax.
    inputs: Vec<Vec<f64>>,
    /// Winning flat input index per pooled output, for each pooling layer.
    pool_argmax: Vec<Option<Vec<usize>>>,
    probs: Vec<f64>,
    labels: Vec<usize>,
    logits: Tensor,
    loss: f64,
}

impl ForwardCache {
    pub fn loss(&self) -> f64 {
        self.loss
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Runs the network on a batch and returns the mean cross-entropy loss.
pub fn forward(
    spec: &ModelSpec,
    params: &LayerParams,
    batch_x: &Tensor,
    batch_y: &[usize],
) -> Result<(f64, ForwardCache)> {
    params.check_spec(spec)?;
    let n = check_batch(spec, batch_x)?;
    if batch_y.len() != n {
        return Err(Error::Shape(format!(
            "{n} samples but {} labels",
            batch_y.len()
        )));
    }
    let classes = spec.classes();
    if let Some(&bad) = batch_y.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }

    let (logits, inputs, pool_argmax) = run_layers(spec, params, batch_x.data().to_vec(), n, true);
    let mut probs = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (s, &y) in batch_y.iter().enumerate() {
        let row = &logits[s * classes..(s + 1) * classes];
        let (loss, p) = softmax_xent(row, y);
        probs[s * classes..(s + 1) * classes].copy_from_slice(&p);
        total += loss;
    }
    let loss = total / n as f64;
    let logits = Tensor::new(vec![n, classes], logits)?;
    Ok((
        loss,
        ForwardCache {
            batch: n,
            inputs,
            pool_argmax,
            probs,
            labels: batch_y.to_vec(),
            logits,
            loss,
        },
    ))
}

/// Logits for a batch, no cache.
pub fn predict(spec: &ModelSpec, params: &LayerParams, batch_x: &Tensor) -> Result<Tensor> {
    params.check_spec(spec)?;
    let n = check_batch(spec, batch_x)?;
    let (logits, _, _) = run_layers(spec, params, batch_x.data().to_vec(), n, false);
    Tensor::new(vec![n, spec.classes()], logits)
}

fn check_batch(spec: &ModelSpec, batch_x: &Tensor) -> Result<usize> {
    let shape = batch_x.shape();
    if shape.len() < 2 || shape[1..] != *spec.input_shape() {
        return Err(Error::LayerShape {
            layer: 0,
            message: format!(
                "batch shape {shape:?} does not match input shape {:?}",
                spec.input_shape()
            ),
        });
    }
    Ok(shape[0])
}

type LayerTrace = (Vec<f64>, Vec<Vec<f64>>, Vec<Option<Vec<usize>>>);

fn run_layers(
    spec: &ModelSpec,
    params: &LayerParams,
    mut act: Vec<f64>,
    n: usize,
    keep: bool,
) -> LayerTrace {
    let body = spec.layers.len() - 1;
    let mut inputs = Vec::with_capacity(if keep { body } else { 0 });
    let mut pool_argmax = Vec::with_capacity(body);
    let mut block = 0;
    for j in 0..body {
        let in_shape = &spec.shapes[j];
        let out_shape = &spec.shapes[j + 1];
        let mut argmax_idx = None;
        let out = match spec.layers[j] {
            Layer::Dense { input, output } => {
                let b = &params.blocks[block];
                block += 1;
                dense_forward(&act, n, input, output, b)
            }
            Layer::Conv2d {
                stride, padding, ..
            } => {
                let b = &params.blocks[block];
                block += 1;
                conv_forward(&act, n, in_shape, out_shape, stride, padding, b)
            }
            Layer::MaxPool2d { window } => {
                let (out, idx) = pool_forward(&act, n, in_shape, out_shape, window);
                argmax_idx = Some(idx);
                out
            }
            Layer::Relu => act.iter().map(|&v| v.max(0.0)).collect(),
            Layer::Scale { factor } => act.iter().map(|&v| v * factor).collect(),
            Layer::Flatten => act.clone(),
            Layer::SoftmaxXent { .. } => unreachable!(),
        };
        pool_argmax.push(argmax_idx);
        if keep {
            inputs.push(std::mem::replace(&mut act, out));
        } else {
            act = out;
        }
    }
    (act, inputs, pool_argmax)
}

/// Per-sample loss and softmax probabilities, via log-sum-exp.
fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[label] - max);
    let probs = exps.iter().map(|e| e / sum).collect();
    (loss, probs)
}

fn dense_forward(x: &[f64], n: usize, input: usize, output: usize, b: &ParamBlock) -> Vec<f64> {
    let w = b.weight.data();
    let bias = b.bias.data();
    let mut out = vec![0.0; n * output];
    for s in 0..n {
        let xs = &x[s * input..(s + 1) * input];
        for o in 0..output {
            let row = &w[o * input..(o + 1) * input];
            let mut acc = bias[o];
            for (wi, xi) in row.iter().zip(xs) {
                acc += wi * xi;
            }
            out[s * output + o] = acc;
        }
    }
    out
}

fn conv_forward(
    x: &[f64],
    n: usize,
    in_shape: &[usize],
    out_shape: &[usize],
    stride: usize,
    padding: usize,
    b: &ParamBlock,
) -> Vec<f64> {
    let (c_in, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (c_out, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
    let k = b.weight.shape()[2];
    let weight = b.weight.data();
    let bias = b.bias.data();
    let in_len = c_in * h * w;
    let out_len = c_out * oh * ow;
    let mut out = vec![0.0; n * out_len];
    for s in 0..n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let os = &mut out[s * out_len..(s + 1) * out_len];
        for o in 0..c_out {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias[o];
                    for c in 0..c_in {
                        for ky in 0..k {
                            let iy = (y * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (xo * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += weight[((o * c_in + c) * k + ky) * k + kx]
                                    * xs[(c * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    os[(o * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    out
}

fn pool_forward(
    x: &[f64],
    n: usize,
    in_shape: &[usize],
    out_shape: &[usize],
    window: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let in_len = c * h * w;
    let out_len = c * oh * ow;
    let mut out = vec![0.0; n * out_len];
    let mut idx = vec![0; n * out_len];
    for s in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = s * in_len + (ch * h + y * window) * w + xo * window;
                    for dy in 0..window {
                        for dx in 0..window {
                            let i = s * in_len + (ch * h + y * window + dy) * w + xo * window + dx;
                            // strict comparison keeps the first (lowest) index on ties
                            if x[i] > x[best] {
                                best = i;
                            }
                        }
                    }
                    let o = s * out_len + (ch * oh + y) * ow + xo;
                    out[o] = x[best];
                    idx[o] = best;
                }
            }
        }
    }
    (out, idx)
}

/// Mask-aware backward pass. Blocks whose mask bit is clear stay exactly zero,
/// and nothing below the shallowest set bit is computed.
pub fn backward(
    spec: &ModelSpec,
    params: &LayerParams,
    cache: &ForwardCache,
    mask: &BpMask,
) -> Result<LayerGrads> {
    if mask.len() != spec.trainable_count() {
        return Err(Error::MaskLength {
            expected: spec.trainable_count(),
            got: mask.len(),
        });
    }
    params.check_spec(spec)?;
    if cache.inputs.len() + 1 != spec.layers.len() {
        return Err(Error::Shape(
            "forward cache does not belong to this model".into(),
        ));
    }
    let mut grads = LayerGrads::zeros_like(params);
    let Some(shallowest) = mask.shallowest_on() else {
        return Ok(grads);
    };
    let stop_layer = spec.trainable[shallowest];

    let n = cache.batch;
    let classes = spec.classes();
    let inv_n = 1.0 / n as f64;
    let mut signal = cache.probs.clone();
    for (s, &y) in cache.labels.iter().enumerate() {
        signal[s * classes + y] -= 1.0;
    }
    signal.iter_mut().for_each(|g| *g *= inv_n);

    let mut block = spec.trainable_count();
    for j in (stop_layer..spec.layers.len() - 1).rev() {
        let input = &cache.inputs[j];
        let in_shape = &spec.shapes[j];
        let out_shape = &spec.shapes[j + 1];
        let need_input_grad = j > stop_layer;
        signal = match spec.layers[j] {
            Layer::Dense {
                input: n_in,
                output,
            } => {
                block -= 1;
                let b = &params.blocks[block];
                if mask.is_on(block) {
                    dense_param_grads(&signal, input, n, n_in, output, &mut grads.blocks[block]);
                    grads.updated[block] = true;
                }
                if need_input_grad {
                    dense_input_grad(&signal, n, n_in, output, b)
                } else {
                    Vec::new()
                }
            }
            Layer::Conv2d {
                stride, padding, ..
            } => {
                block -= 1;
                let b = &params.blocks[block];
                let geom = ConvGeom::new(in_shape, out_shape, b.weight.shape()[2], stride, padding);
                if mask.is_on(block) {
                    conv_param_grads(&signal, input, n, &geom, &mut grads.blocks[block]);
                    grads.updated[block] = true;
                }
                if need_input_grad {
                    conv_input_grad(&signal, n, &geom, b)
                } else {
                    Vec::new()
                }
            }
            Layer::MaxPool2d { .. } => {
                let idx = cache.pool_argmax[j].as_ref().expect("pool indices cached");
                let mut g = vec![0.0; input.len()];
                for (o, &i) in idx.iter().enumerate() {
                    g[i] += signal[o];
                }
                g
            }
            Layer::Relu => signal
                .iter()
                .zip(input)
                .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                .collect(),
            Layer::Scale { factor } => signal.iter().map(|&g| g * factor).collect(),
            Layer::Flatten => signal,
            Layer::SoftmaxXent { .. } => unreachable!(),
        };
    }
    Ok(grads)
}

fn dense_param_grads(
    signal: &[f64],
    x: &[f64],
    n: usize,
    input: usize,
    output: usize,
    out: &mut ParamBlock,
) {
    let dw = out.weight.data_mut();
    for s in 0..n {
        let xs = &x[s * input..(s + 1) * input];
        for o in 0..output {
            let g = signal[s * output + o];
            if g == 0.0 {
                continue;
            }
            let row = &mut dw[o * input..(o + 1) * input];
            for (d, xi) in row.iter_mut().zip(xs) {
                *d += g * xi;
            }
        }
    }
    let db = out.bias.data_mut();
    for s in 0..n {
        for o in 0..output {
            db[o] += signal[s * output + o];
        }
    }
}

fn dense_input_grad(signal: &[f64], n: usize, input: usize, output: usize, b: &ParamBlock) -> Vec<f64> {
    let w = b.weight.data();
    let mut dx = vec![0.0; n * input];
    for s in 0..n {
        let dxs = &mut dx[s * input..(s + 1) * input];
        for o in 0..output {
            let g = signal[s * output + o];
            if g == 0.0 {
                continue;
            }
            for (d, wi) in dxs.iter_mut().zip(&w[o * input..(o + 1) * input]) {
                *d += g * wi;
            }
        }
    }
    dx
}

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn new(in_shape: &[usize], out_shape: &[usize], k: usize, stride: usize, padding: usize) -> Self {
        Self {
            c_in: in_shape[0],
            h: in_shape[1],
            w: in_shape[2],
            c_out: out_shape[0],
            oh: out_shape[1],
            ow: out_shape[2],
            k,
            stride,
            padding,
        }
    }

    fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.c_out * self.oh * self.ow
    }

    /// Calls `f(weight_index, input_index, output_index)` for every tap that
    /// lands inside the (unpadded) input, in a fixed order.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, pad) = (self.k as isize, self.padding as isize);
        for o in 0..self.c_out {
            for y in 0..self.oh {
                for x in 0..self.ow {
                    let out_i = (o * self.oh + y) * self.ow + x;
                    for c in 0..self.c_in {
                        for ky in 0..k {
                            let iy = (y * self.stride) as isize + ky - pad;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (x * self.stride) as isize + kx - pad;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                let w_i = ((o * self.c_in + c) * self.k + ky as usize) * self.k
                                    + kx as usize;
                                let in_i = (c * self.h + iy as usize) * self.w + ix as usize;
                                f(w_i, in_i, out_i);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_param_grads(signal: &[f64], x: &[f64], n: usize, g: &ConvGeom, out: &mut ParamBlock) {
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let dw = out.weight.data_mut();
    for s in 0..n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let gs = &signal[s * out_len..(s + 1) * out_len];
        g.for_each_tap(|w_i, in_i, out_i| dw[w_i] += gs[out_i] * xs[in_i]);
    }
    let db = out.bias.data_mut();
    let plane = g.oh * g.ow;
    for s in 0..n {
        for o in 0..g.c_out {
            let start = s * out_len + o * plane;
            for v in &signal[start..start + plane] {
                db[o] += v;
            }
        }
    }
}

fn conv_input_grad(signal: &[f64], n: usize, g: &ConvGeom, b: &ParamBlock) -> Vec<f64> {
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let w = b.weight.data();
    let mut dx = vec![0.0; n * in_len];
    for s in 0..n {
        let gs = &signal[s * out_len..(s + 1) * out_len];
        let dxs = &mut dx[s * in_len..(s + 1) * in_len];
        g.for_each_tap(|w_i, in_i, out_i| dxs[in_i] += w[w_i] * gs[out_i]);
    }
    dx
}

/// Accuracy and mean loss of a model over a labelled set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
}

const EVAL_CHUNK: usize = 256;

/// Accuracy (argmax, lowest index on ties) and mean cross-entropy.
pub fn evaluate(
    spec: &ModelSpec,
    params: &LayerParams,
    features: &Tensor,
    labels: &[usize],
) -> Result<Evaluation> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if features.rows() != n {
        return Err(Error::Shape(format!(
            "{} feature rows but {n} labels",
            features.rows()
        )));
    }
    let classes = spec.classes();
    let mut correct = 0usize;
    let mut total_loss = 0.0;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let chunk = features.select_rows(&idx)?;
        let logits = predict(spec, params, &chunk)?;
        for (s, &y) in labels[start..end].iter().enumerate() {
            if y >= classes {
                return Err(Error::InvalidArgument(format!(
                    "label {y} out of range for {classes} classes"
                )));
            }
            let row = logits.row(s);
            if argmax(row) == y {
                correct += 1;
            }
            total_loss += softmax_xent(row, y).0;
        }
    }
    Ok(Evaluation {
        accuracy: correct as f64 / n as f64,
        mean_loss: total_loss / n as f64,
    })
}
