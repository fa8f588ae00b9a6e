//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use fedpmt::nn::{Layer, LayerParams, ModelSpec};
use fedpmt::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random small dense or conv classifier; odd seeds give conv models.
pub fn random_model(seed: u64) -> ModelSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = rng.gen_range(2..=4);
    if seed.is_multiple_of(2) {
        let depth = rng.gen_range(1..=3);
        let mut sizes = vec![rng.gen_range(2..=5)];
        for _ in 0..depth {
            sizes.push(rng.gen_range(2..=5));
        }
        sizes.push(classes);
        ModelSpec::fcnn(&sizes).unwrap()
    } else {
        let c_in = rng.gen_range(1..=2);
        let c_mid = rng.gen_range(1..=3);
        let stride = rng.gen_range(1..=2);
        let padding = rng.gen_range(0..=1);
        let side = 6;
        let conv_out = (side + 2 * padding - 3) / stride + 1;
        let pooled = conv_out / 2;
        let mut layers = vec![
            Layer::Conv2d {
                in_channels: c_in,
                out_channels: c_mid,
                kernel: 3,
                stride,
                padding,
            },
            Layer::Relu,
            Layer::MaxPool2d { window: 2 },
            Layer::Flatten,
        ];
        let flat = c_mid * pooled * pooled;
        let hidden = rng.gen_range(2..=4);
        layers.extend([
            Layer::Dense {
                input: flat,
                output: hidden,
            },
            Layer::Relu,
            Layer::Dense {
                input: hidden,
                output: classes,
            },
            Layer::SoftmaxXent { classes },
        ]);
        ModelSpec::new(vec![c_in, side, side], layers).unwrap()
    }
}

/// Random batch with continuous features and uniform labels.
pub fn random_batch(spec: &ModelSpec, n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![n];
    shape.extend_from_slice(spec.input_shape());
    let len = n * spec.input_len();
    let x = Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let y = (0..n).map(|_| rng.gen_range(0..spec.classes())).collect();
    (x, y)
}

/// Params with non-zero biases so bias gradients are exercised away from init.
pub fn random_params(spec: &ModelSpec, seed: u64) -> LayerParams {
    let mut p = LayerParams::init(spec, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
    for b in &mut p.blocks {
        for v in b.bias.data_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
    }
    p
}

/// Straightforward per-sample evaluation of the network, written without
/// reference to the library's buffers or loop order.
pub fn naive_logits(spec: &ModelSpec, params: &LayerParams, x: &[f64]) -> Vec<f64> {
    let mut shape: Vec<usize> = spec.input_shape().to_vec();
    let mut act = x.to_vec();
    let mut block = 0;
    for layer in spec.layers() {
        match *layer {
            Layer::Dense { input, output } => {
                let p = &params.blocks[block];
                block += 1;
                let w = p.weight.data();
                act = (0..output)
                    .map(|o| p.bias.data()[o] + (0..input).map(|i| w[o * input + i] * act[i]).sum::<f64>())
                    .collect();
                shape = vec![output];
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let p = &params.blocks[block];
                block += 1;
                let (h, w) = (shape[1] as isize, shape[2] as isize);
                let oh = ((h as usize + 2 * padding - kernel) / stride + 1) as isize;
                let ow = ((w as usize + 2 * padding - kernel) / stride + 1) as isize;
                let wt = p.weight.data();
                let mut out = Vec::new();
                for o in 0..out_channels {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut s = p.bias.data()[o];
                            for c in 0..in_channels {
                                for ky in 0..kernel as isize {
                                    for kx in 0..kernel as isize {
                                        let iy = y * stride as isize + ky - padding as isize;
                                        let ix = xx * stride as isize + kx - padding as isize;
                                        if iy < 0 || ix < 0 || iy >= h || ix >= w {
                                            continue;
                                        }
                                        let wi = ((o * in_channels + c) * kernel + ky as usize) * kernel
                                            + kx as usize;
                                        s += wt[wi] * act[(c * h as usize + iy as usize) * w as usize + ix as usize];
                                    }
                                }
                            }
                            out.push(s);
                        }
                    }
                }
                act = out;
                shape = vec![out_channels, oh as usize, ow as usize];
            }
            Layer::MaxPool2d { window } => {
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (oh, ow) = (h / window, w / window);
                let mut out = Vec::new();
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut m = f64::NEG_INFINITY;
                            for dy in 0..window {
                                for dx in 0..window {
                                    m = m.max(act[(ch * h + y * window + dy) * w + xx * window + dx]);
                                }
                            }
                            out.push(m);
                        }
                    }
                }
                act = out;
                shape = vec![c, oh, ow];
            }
            Layer::Relu => act.iter_mut().for_each(|v| *v = v.max(0.0)),
            Layer::Scale { factor } => act.iter_mut().for_each(|v| *v *= factor),
            Layer::Flatten => shape = vec![act.len()],
            Layer::SoftmaxXent { .. } => {}
        }
    }
    act
}

/// Mean cross-entropy from `naive_logits`.
pub fn naive_loss(spec: &ModelSpec, params: &LayerParams, x: &Tensor, y: &[usize]) -> f64 {
    let d = spec.input_len();
    let mut total = 0.0;
    for (s, &label) in y.iter().enumerate() {
        let z = naive_logits(spec, params, &x.data()[s * d..(s + 1) * d]);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[label];
    }
    total / y.len() as f64
}

/// Central finite difference of `naive_loss` with respect to every parameter
/// of block `l`; returns `(weight_grad, bias_grad)`.
pub fn finite_diff_block(
    spec: &ModelSpec,
    params: &LayerParams,
    x: &Tensor,
    y: &[usize],
    l: usize,
    h: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut p = params.clone();
    let mut probe = |get: &dyn Fn(&mut LayerParams) -> &mut f64| {
        let orig = *get(&mut p);
        *get(&mut p) = orig + h;
        let up = naive_loss(spec, &p, x, y);
        *get(&mut p) = orig - h;
        let down = naive_loss(spec, &p, x, y);
        *get(&mut p) = orig;
        (up - down) / (2.0 * h)
    };
    let nw = params.blocks[l].weight.len();
    let nb = params.blocks[l].bias.len();
    let gw = (0..nw)
        .map(|i| probe(&move |q: &mut LayerParams| &mut q.blocks[l].weight.data_mut()[i]))
        .collect();
    let gb = (0..nb)
        .map(|i| probe(&move |q: &mut LayerParams| &mut q.blocks[l].bias.data_mut()[i]))
        .collect();
    (gw, gb)
}

/// `|a − b| / max(|a| + |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(floor)
}
