//! Federated dropout: each device trains a sub-model made of a random subset
//! of every hidden layer's units (channels, for convolutions). Inputs and the
//! classifier's outputs are never dropped. Inside the sub-model, activations
//! leaving a dropped layer are scaled by `1/keep_rate`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cost::flops_model;
use crate::error::{Error, Result};
use crate::nn::{Layer, LayerGrads, LayerParams, ModelSpec, ParamBlock};
use crate::tensor::Tensor;

/// Which rows/columns of the global model a sub-model holds.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutPlan {
    pub keep_rate: f64,
    /// Factor applied to activations leaving a dropped layer.
    pub rescale: f64,
    /// Kept output units (neurons or channels) of each trainable layer.
    pub kept_outputs: Vec<Vec<usize>>,
    /// Kept input indices (features for dense, channels for conv).
    pub kept_inputs: Vec<Vec<usize>>,
    /// Whether the layer's inputs come from a dropped (rescaled) layer.
    pub scaled_inputs: Vec<bool>,
    pub sub_spec: ModelSpec,
}

impl DropoutPlan {
    /// Number of sub-model parameters.
    pub fn num_params(&self) -> usize {
        self.kept_outputs
            .iter()
            .zip(&self.kept_inputs)
            .enumerate()
            .map(|(l, (o, i))| {
                let (w, _) = self.sub_spec.block_shapes(l);
                let taps: usize = w[2..].iter().product();
                o.len() * i.len() * taps + o.len()
            })
            .sum()
    }
}

/// Units kept out of `n` at `keep_rate`: `⌈keep_rate·n⌉`, at least one.
/// The small slack keeps rates of the form `k/n` from rounding up to `k+1`.
pub fn kept_count(keep_rate: f64, n: usize) -> usize {
    ((keep_rate * n as f64 - 1e-9).ceil().max(1.0) as usize).min(n)
}

fn check_rate(keep_rate: f64) -> Result<()> {
    if !(keep_rate > 0.0 && keep_rate <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "keep rate {keep_rate} would empty a layer; need 0 < rate <= 1"
        )));
    }
    Ok(())
}

struct Walk {
    layers: Vec<Layer>,
    kept_outputs: Vec<Vec<usize>>,
    kept_inputs: Vec<Vec<usize>>,
    scaled_inputs: Vec<bool>,
}

fn walk(
    spec: &ModelSpec,
    keep_rate: f64,
    mut choose: impl FnMut(usize, usize) -> Vec<usize>,
) -> Walk {
    let input_shape = spec.input_shape();
    let mut current: Vec<usize> = if input_shape.len() == 3 {
        (0..input_shape[0]).collect()
    } else {
        (0..spec.input_len()).collect()
    };
    let mut scaled = false;
    let last = spec.trainable_count() - 1;
    let mut l = 0;
    let mut out = Walk {
        layers: Vec::new(),
        kept_outputs: Vec::new(),
        kept_inputs: Vec::new(),
        scaled_inputs: Vec::new(),
    };
    for (j, layer) in spec.layers().iter().enumerate() {
        let units = match *layer {
            Layer::Dense { output, .. } => Some(output),
            Layer::Conv2d { out_channels, .. } => Some(out_channels),
            _ => None,
        };
        match (units, *layer) {
            (Some(n), _) => {
                if scaled {
                    out.layers.push(Layer::Scale {
                        factor: 1.0 / keep_rate,
                    });
                }
                let kept = if l == last {
                    (0..n).collect()
                } else {
                    choose(n, kept_count(keep_rate, n))
                };
                out.layers.push(match *layer {
                    Layer::Dense { .. } => Layer::Dense {
                        input: current.len(),
                        output: kept.len(),
                    },
                    Layer::Conv2d {
                        kernel,
                        stride,
                        padding,
                        ..
                    } => Layer::Conv2d {
                        in_channels: current.len(),
                        out_channels: kept.len(),
                        kernel,
                        stride,
                        padding,
                    },
                    _ => unreachable!(),
                });
                out.kept_inputs.push(std::mem::take(&mut current));
                out.scaled_inputs.push(scaled);
                out.kept_outputs.push(kept.clone());
                current = kept;
                scaled = l != last && keep_rate < 1.0;
                l += 1;
            }
            (None, Layer::Flatten) => {
                let shape = spec.shape_at(j);
                if shape.len() == 3 {
                    let plane = shape[1] * shape[2];
                    current = current
                        .iter()
                        .flat_map(|&c| c * plane..(c + 1) * plane)
                        .collect();
                }
                out.layers.push(*layer);
            }
            (None, other) => out.layers.push(other),
        }
    }
    out
}

/// Architecture of a sub-model at `keep_rate` (unit choice does not matter
/// for the shape).
pub fn dropout_spec(spec: &ModelSpec, keep_rate: f64) -> Result<ModelSpec> {
    check_rate(keep_rate)?;
    let w = walk(spec, keep_rate, |_, k| (0..k).collect());
    ModelSpec::new(spec.input_shape().to_vec(), w.layers)
}

/// Draws a random sub-model and slices its parameters out of `global`.
pub fn feddrop_generate(
    spec: &ModelSpec,
    global: &LayerParams,
    keep_rate: f64,
    seed: u64,
) -> Result<(LayerParams, DropoutPlan)> {
    check_rate(keep_rate)?;
    global.check_spec(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = walk(spec, keep_rate, |n, k| {
        let mut idx = sample(&mut rng, n, k).into_vec();
        idx.sort_unstable();
        idx
    });
    let sub_spec = ModelSpec::new(spec.input_shape().to_vec(), w.layers)?;
    let blocks = (0..spec.trainable_count())
        .map(|l| slice_block(&global.blocks[l], &w.kept_outputs[l], &w.kept_inputs[l]))
        .collect::<Result<Vec<_>>>()?;
    let plan = DropoutPlan {
        keep_rate,
        rescale: 1.0 / keep_rate,
        kept_outputs: w.kept_outputs,
        kept_inputs: w.kept_inputs,
        scaled_inputs: w.scaled_inputs,
        sub_spec,
    };
    Ok((LayerParams { blocks }, plan))
}

/// Weight layout `[out, in, taps...]`; `taps` is 1 for dense layers.
fn taps(weight: &Tensor) -> usize {
    weight.shape()[2..].iter().product()
}

fn slice_block(block: &ParamBlock, outputs: &[usize], inputs: &[usize]) -> Result<ParamBlock> {
    let shape = block.weight.shape();
    let (n_in, t) = (shape[1], taps(&block.weight));
    let src = block.weight.data();
    let mut data = Vec::with_capacity(outputs.len() * inputs.len() * t);
    for &o in outputs {
        for &i in inputs {
            let start = (o * n_in + i) * t;
            data.extend_from_slice(&src[start..start + t]);
        }
    }
    let mut sub_shape = shape.to_vec();
    sub_shape[0] = outputs.len();
    sub_shape[1] = inputs.len();
    let bias = outputs.iter().map(|&o| block.bias.data()[o]).collect();
    Ok(ParamBlock {
        weight: Tensor::new(sub_shape, data)?,
        bias: Tensor::new(vec![outputs.len()], bias)?,
    })
}

/// Full-size delta and coverage mask for one sub-model update.
/// Per-layer flags for the weights and biases a device held.
type Coverage = (Vec<bool>, Vec<bool>);

fn scatter(
    global: &LayerParams,
    sub_delta: &LayerGrads,
    plan: &DropoutPlan,
) -> Result<(Vec<ParamBlock>, Vec<Coverage>)> {
    if sub_delta.blocks.len() != global.num_blocks() || plan.kept_outputs.len() != global.num_blocks()
    {
        return Err(Error::Shape("dropout plan does not match the global model".into()));
    }
    let mut full = Vec::with_capacity(global.num_blocks());
    let mut cover = Vec::with_capacity(global.num_blocks());
    for (l, g) in global.blocks.iter().enumerate() {
        let outputs = &plan.kept_outputs[l];
        let inputs = &plan.kept_inputs[l];
        let sub = &sub_delta.blocks[l];
        let t = taps(&g.weight);
        let n_in = g.weight.shape()[1];
        if sub.weight.len() != outputs.len() * inputs.len() * t || sub.bias.len() != outputs.len()
        {
            return Err(Error::Shape(format!(
                "sub-model update for layer {l} does not match its plan"
            )));
        }
        let mut block = ParamBlock::zeros_like(g);
        let mut w_cover = vec![false; g.weight.len()];
        let mut b_cover = vec![false; g.bias.len()];
        let wd = block.weight.data_mut();
        let sd = sub.weight.data();
        for (a, &o) in outputs.iter().enumerate() {
            for (b, &i) in inputs.iter().enumerate() {
                let dst = (o * n_in + i) * t;
                let src = (a * inputs.len() + b) * t;
                for s in 0..t {
                    wd[dst + s] = sd[src + s];
                    w_cover[dst + s] = true;
                }
            }
            block.bias.data_mut()[o] = sub.bias.data()[a];
            b_cover[o] = true;
        }
        full.push(block);
        cover.push((w_cover, b_cover));
    }
    Ok((full, cover))
}

/// Each global parameter moves by the mean delta of the devices whose
/// sub-model contained it; parameters no sub-model held are unchanged.
pub fn feddrop_aggregate(
    global: &LayerParams,
    updates: &[(&LayerGrads, &DropoutPlan)],
) -> Result<LayerParams> {
    let scattered: Vec<_> = updates
        .iter()
        .map(|(d, p)| scatter(global, d, p))
        .collect::<Result<_>>()?;
    let mut out = global.clone();
    for (l, block) in out.blocks.iter_mut().enumerate() {
        let count = |pick: fn(&Coverage) -> &Vec<bool>, i: usize| {
            scattered.iter().filter(|(_, c)| pick(&c[l])[i]).count()
        };
        let mut acc_w = vec![0.0; block.weight.len()];
        let mut acc_b = vec![0.0; block.bias.len()];
        for (i, acc) in acc_w.iter_mut().enumerate() {
            let n = count(|c| &c.0, i);
            if n == 0 {
                continue;
            }
            let a = 1.0 / n as f64;
            for (full, cover) in &scattered {
                if cover[l].0[i] {
                    *acc += a * full[l].weight.data()[i];
                }
            }
        }
        for (i, acc) in acc_b.iter_mut().enumerate() {
            let n = count(|c| &c.1, i);
            if n == 0 {
                continue;
            }
            let a = 1.0 / n as f64;
            for (full, cover) in &scattered {
                if cover[l].1[i] {
                    *acc += a * full[l].bias.data()[i];
                }
            }
        }
        for (v, d) in block.weight.data_mut().iter_mut().zip(&acc_w) {
            *v -= d;
        }
        for (v, d) in block.bias.data_mut().iter_mut().zip(&acc_b) {
            *v -= d;
        }
    }
    Ok(out)
}

/// Smallest keep rate whose full FP+BP sub-model cost reaches `target_flops`.
///
/// Sub-model cost only changes at rates `k/n` for some hidden width `n`, so
/// the search runs over that finite set; the result is exact to one neuron.
pub fn feddrop_match_rate(target_flops: u64, spec: &ModelSpec, batch: usize) -> Result<f64> {
    let hidden: Vec<usize> = spec
        .trainable_layers()
        .iter()
        .take(spec.trainable_count() - 1)
        .map(|&j| match spec.layers()[j] {
            Layer::Dense { output, .. } => output,
            Layer::Conv2d { out_channels, .. } => out_channels,
            _ => unreachable!(),
        })
        .collect();
    let full = flops_model(spec, batch).full();
    if hidden.is_empty() {
        return if target_flops == full {
            Ok(1.0)
        } else {
            Err(Error::InvalidArgument(
                "model has no hidden layers to drop".into(),
            ))
        };
    }
    let mut rates: Vec<f64> = hidden
        .iter()
        .flat_map(|&n| (1..=n).map(move |k| k as f64 / n as f64))
        .collect();
    rates.sort_by(f64::total_cmp);
    rates.dedup();
    let cost = |r: f64| -> Result<u64> { Ok(flops_model(&dropout_spec(spec, r)?, batch).full()) };
    let floor = cost(rates[0])?;
    if target_flops < floor || target_flops > full {
        return Err(Error::InvalidArgument(format!(
            "target {target_flops} FLOPs outside the reachable range [{floor}, {full}]"
        )));
    }
    // cost is non-decreasing in the rate
    let (mut lo, mut hi) = (0usize, rates.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if cost(rates[mid])? >= target_flops {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(rates[lo])
}
