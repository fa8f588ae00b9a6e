//! Layer-wise weighted aggregation of heterogeneous-width updates.
//!
//! Device `k` contributes to layer `l` with weight
//! `A_k[l] = f_k[l] / Σ_k' f_k'[l]`, so every layer is averaged only over the
//! devices that actually trained it. Layers nobody trained keep their values.

use crate::error::{Error, Result};
use crate::masking::BpMask;
use crate::nn::{LayerGrads, LayerParams};

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationWeights {
    /// `per_device[k][l]`, devices in the order they were supplied.
    pub per_device: Vec<Vec<f64>>,
    /// Layers with no updater in this round.
    pub unreached_layers: Vec<usize>,
}

impl AggregationWeights {
    pub fn num_layers(&self) -> usize {
        self.per_device.first().map_or(0, Vec::len)
    }

    pub fn layer_sum(&self, layer: usize) -> f64 {
        self.per_device.iter().map(|w| w[layer]).sum()
    }
}

/// `A_k[l] = f_k[l] / Σ f[l]`, zero where no device updates layer `l`.
pub fn compute_weights(masks: &[BpMask]) -> Result<AggregationWeights> {
    compute_weights_impl(masks, None)
}

/// Like [`compute_weights`] but each mask bit is scaled by the device's
/// sample count, so `a_l ∝ f_k[l]·|D_k|`.
pub fn compute_weights_sized(masks: &[BpMask], sizes: &[usize]) -> Result<AggregationWeights> {
    if sizes.len() != masks.len() {
        return Err(Error::InvalidArgument(format!(
            "{} dataset sizes for {} devices",
            sizes.len(),
            masks.len()
        )));
    }
    compute_weights_impl(masks, Some(sizes))
}

fn compute_weights_impl(masks: &[BpMask], sizes: Option<&[usize]>) -> Result<AggregationWeights> {
    let Some(first) = masks.first() else {
        return Err(Error::InvalidArgument("no devices to aggregate".into()));
    };
    let layers = first.len();
    if let Some(bad) = masks.iter().find(|m| m.len() != layers) {
        return Err(Error::MaskLength {
            expected: layers,
            got: bad.len(),
        });
    }
    let raw: Vec<Vec<f64>> = masks
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let scale = sizes.map_or(1.0, |s| s[k] as f64);
            m.bits()
                .iter()
                .map(|&b| if b { scale } else { 0.0 })
                .collect()
        })
        .collect();
    let mut per_device = vec![vec![0.0; layers]; masks.len()];
    let mut unreached_layers = Vec::new();
    for l in 0..layers {
        let denom: f64 = raw.iter().map(|r| r[l]).sum();
        if denom > 0.0 {
            for (k, r) in raw.iter().enumerate() {
                per_device[k][l] = r[l] / denom;
            }
        } else {
            unreached_layers.push(l);
        }
    }
    Ok(AggregationWeights {
        per_device,
        unreached_layers,
    })
}

/// New block `l` = old block `l` − Σ_k `A_k[l]` · delta_k block `l`, summed
/// in the order the updates are given.
pub fn aggregate(
    global: &LayerParams,
    updates: &[&LayerGrads],
    masks: &[BpMask],
) -> Result<LayerParams> {
    let weights = compute_weights(masks)?;
    aggregate_weighted(global, updates, &weights)
}

pub fn aggregate_weighted(
    global: &LayerParams,
    updates: &[&LayerGrads],
    weights: &AggregationWeights,
) -> Result<LayerParams> {
    if updates.len() != weights.per_device.len() {
        return Err(Error::InvalidArgument(format!(
            "{} updates for {} weight vectors",
            updates.len(),
            weights.per_device.len()
        )));
    }
    if weights.num_layers() != global.num_blocks() {
        return Err(Error::MaskLength {
            expected: global.num_blocks(),
            got: weights.num_layers(),
        });
    }
    for u in updates {
        if u.blocks.len() != global.num_blocks()
            || !u.as_params().same_layout(global)
        {
            return Err(Error::Shape(
                "update layout does not match the global model".into(),
            ));
        }
    }
    let mut combined: Vec<_> = global
        .blocks
        .iter()
        .map(crate::nn::ParamBlock::zeros_like)
        .collect();
    for (u, w) in updates.iter().zip(&weights.per_device) {
        for (l, acc) in combined.iter_mut().enumerate() {
            if w[l] != 0.0 {
                acc.axpy(w[l], &u.blocks[l])?;
            }
        }
    }
    let mut out = global.clone();
    for (l, (block, acc)) in out.blocks.iter_mut().zip(&combined).enumerate() {
        if weights.unreached_layers.contains(&l) {
            continue;
        }
        block.weight.sub_assign(&acc.weight)?;
        block.bias.sub_assign(&acc.bias)?;
    }
    Ok(out)
}
