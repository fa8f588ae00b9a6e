//! Back-propagation masks, the width menu, and the masked local update.
//!
//! A mask has one bit per trainable layer (shallow to deep). Width `i` of a
//! menu back-propagates through the deepest `layer_counts[i-1]` layers; every
//! device still runs the full forward pass.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, LayerGrads, LayerParams, ModelSpec};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BpMask {
    bits: Vec<bool>,
}

impl BpMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn all_ones(layers: usize) -> Self {
        Self {
            bits: vec![true; layers],
        }
    }

    /// Mask updating only the deepest `count` of `layers` layers.
    pub fn suffix(layers: usize, count: usize) -> Self {
        let count = count.min(layers);
        Self {
            bits: (0..layers).map(|l| l >= layers - count).collect(),
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_on(&self, layer: usize) -> bool {
        self.bits[layer]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    /// Index of the shallowest layer with its bit set.
    pub fn shallowest_on(&self) -> Option<usize> {
        self.bits.iter().position(|&b| b)
    }

    /// True when the set bits form a contiguous block ending at the last layer.
    pub fn is_suffix(&self) -> bool {
        match self.shallowest_on() {
            None => true,
            Some(first) => self.bits[first..].iter().all(|&b| b),
        }
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn and(&self, other: &BpMask) -> BpMask {
        BpMask {
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect(),
        }
    }
}

impl std::fmt::Display for BpMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[")?;
        for (i, b) in self.bits.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}", u8::from(*b))?;
        }
        write!(f, "]")
    }
}

/// The discrete set of model widths, narrowest first. Widths are numbered
/// from 1; width `len()` is the full model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WidthMenu {
    masks: Vec<BpMask>,
}

impl WidthMenu {
    pub fn num_widths(&self) -> usize {
        self.masks.len()
    }

    pub fn num_layers(&self) -> usize {
        self.masks[0].len()
    }

    /// Mask of width `i` (1-based).
    pub fn mask(&self, width: usize) -> &BpMask {
        &self.masks[width - 1]
    }

    pub fn masks(&self) -> &[BpMask] {
        &self.masks
    }

    pub fn full_width(&self) -> usize {
        self.masks.len()
    }

    /// Number of layers each width updates, narrowest first.
    pub fn layer_counts(&self) -> Vec<usize> {
        self.masks.iter().map(BpMask::count_ones).collect()
    }
}

/// Builds the width menu for `num_layers` trainable layers.
///
/// Without explicit `layer_counts`, width `i` updates the deepest
/// `num_layers - num_widths + i` layers.
pub fn build_width_menu(
    num_layers: usize,
    num_widths: usize,
    layer_counts: Option<&[usize]>,
) -> Result<WidthMenu> {
    if num_widths == 0 || num_widths > num_layers {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= widths ({num_widths}) <= trainable layers ({num_layers})"
        )));
    }
    let counts: Vec<usize> = match layer_counts {
        Some(c) => {
            if c.len() != num_widths {
                return Err(Error::InvalidArgument(format!(
                    "{} layer counts for {num_widths} widths",
                    c.len()
                )));
            }
            if c[0] == 0 || c.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument(format!(
                    "layer counts {c:?} must be positive and strictly increasing"
                )));
            }
            if c[c.len() - 1] != num_layers {
                return Err(Error::InvalidArgument(format!(
                    "widest layer count must equal {num_layers}, got {c:?}"
                )));
            }
            c.to_vec()
        }
        None => (1..=num_widths)
            .map(|i| num_layers - num_widths + i)
            .collect(),
    };
    Ok(WidthMenu {
        masks: counts
            .into_iter()
            .map(|k| BpMask::suffix(num_layers, k))
            .collect(),
    })
}

/// Layer-wise multiplication: block `l` of the result is `b[l]` scaled by `a[l]`.
pub fn layerwise_mul(a: &[f64], b: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scalars for {} blocks",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&s, block)| block.iter().map(|v| s * v).collect())
        .collect())
}

/// [`layerwise_mul`] on parameter blocks (weights and bias scaled together).
pub fn layerwise_mul_params(a: &[f64], b: &LayerParams) -> Result<LayerParams> {
    if a.len() != b.num_blocks() {
        return Err(Error::InvalidArgument(format!(
            "{} scalars for {} blocks",
            a.len(),
            b.num_blocks()
        )));
    }
    let mut out = b.clone();
    for (block, &s) in out.blocks.iter_mut().zip(a) {
        block.scale(s);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalConfig {
    pub step_size: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Result of local training: the accumulated delta (`global − final`, with
/// the step size folded in) and the final local parameters.
#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub delta: LayerGrads,
    pub params: LayerParams,
    pub mean_loss: f64,
}

/// `steps` masked mini-batch SGD steps from `global`.
///
/// The local model is always `global − delta`, so masked-off blocks keep the
/// global values exactly and the server can recover the final model from the
/// delta bit-for-bit.
pub fn local_update(
    spec: &ModelSpec,
    global: &LayerParams,
    data: &Dataset,
    mask: &BpMask,
    cfg: &LocalConfig,
) -> Result<LocalUpdate> {
    let n = data.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if cfg.steps == 0 {
        return Err(Error::InvalidArgument("local steps must be >= 1".into()));
    }
    if cfg.batch_size == 0 || cfg.batch_size > n {
        return Err(Error::InvalidArgument(format!(
            "batch size {} not in 1..={n}",
            cfg.batch_size
        )));
    }
    if mask.len() != spec.trainable_count() {
        return Err(Error::MaskLength {
            expected: spec.trainable_count(),
            got: mask.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;

    let mut delta = LayerGrads::zeros_like(global);
    let mut local = global.clone();
    let mut loss_sum = 0.0;
    for _ in 0..cfg.steps {
        if cursor >= n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(n);
        let (x, y) = data.batch(&order[cursor..end])?;
        cursor = end;

        let (loss, cache) = nn::forward(spec, &local, &x, &y)?;
        loss_sum += loss;
        let grads = nn::backward(spec, &local, &cache, mask)?;
        for l in 0..global.num_blocks() {
            if !mask.is_on(l) {
                continue;
            }
            delta.blocks[l].axpy(cfg.step_size, &grads.blocks[l])?;
            let block = &mut local.blocks[l];
            block.weight = global.blocks[l].weight.clone();
            block.weight.sub_assign(&delta.blocks[l].weight)?;
            block.bias = global.blocks[l].bias.clone();
            block.bias.sub_assign(&delta.blocks[l].bias)?;
        }
    }
    delta.updated = mask.bits().to_vec();
    Ok(LocalUpdate {
        delta,
        params: local,
        mean_loss: loss_sum / cfg.steps as f64,
    })
}
