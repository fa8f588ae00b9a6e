//! FLOP accounting for forward and (masked) backward passes, and the device
//! compute-time model.
//!
//! Dense layers with `n` units, `n_down` inputs and `n_up` units in the next
//! trainable layer, on a batch of `x` samples:
//!
//! * forward: `n·n_down·x + n·x` (weights plus activation)
//! * backward, output layer: `n·x + n·x + n·x·n_down + n·n_down`
//! * backward, hidden layer: `n·x + n·n_up·x + n·x·n_down + n·n_down`
//!
//! Convolutions cost `c_in·k²·c_out·m²·x` forward and twice that backward.
//! Only weight arithmetic is counted: biases, pooling, flatten and the
//! softmax/loss are free.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::masking::{BpMask, WidthMenu};
use crate::nn::{Layer, ModelSpec};

/// Forward cost plus the backward cost of each trainable layer (shallow to deep).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostBreakdown {
    pub fp_total: u64,
    pub bp_per_layer: Vec<u64>,
}

impl CostBreakdown {
    /// Full forward pass plus backward for the layers whose mask bit is set.
    pub fn total(&self, mask: &BpMask) -> Result<u64> {
        if mask.len() != self.bp_per_layer.len() {
            return Err(Error::MaskLength {
                expected: self.bp_per_layer.len(),
                got: mask.len(),
            });
        }
        Ok(self.fp_total
            + self
                .bp_per_layer
                .iter()
                .zip(mask.bits())
                .filter(|(_, &on)| on)
                .map(|(c, _)| c)
                .sum::<u64>())
    }

    pub fn full(&self) -> u64 {
        self.fp_total + self.bp_per_layer.iter().sum::<u64>()
    }

    pub fn ratio_to_full(&self, mask: &BpMask) -> Result<f64> {
        Ok(self.total(mask)? as f64 / self.full() as f64)
    }
}

fn dense_fp(n: u64, n_down: u64, x: u64) -> u64 {
    n * n_down * x + n * x
}

fn dense_bp_output(n: u64, n_down: u64, x: u64) -> u64 {
    n * x + n * x + n * x * n_down + n * n_down
}

fn dense_bp_hidden(n: u64, n_up: u64, n_down: u64, x: u64) -> u64 {
    n * x + n * n_up * x + n * x * n_down + n * n_down
}

/// Cost of a fully connected network with layer sizes `n_0..n_L`.
pub fn flops_fcnn(layer_sizes: &[usize], batch: usize) -> Result<CostBreakdown> {
    if layer_sizes.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least an input and an output size".into(),
        ));
    }
    let n: Vec<u64> = layer_sizes.iter().map(|&v| v as u64).collect();
    let x = batch as u64;
    let last = n.len() - 1;
    let fp_total = (1..=last).map(|j| dense_fp(n[j], n[j - 1], x)).sum();
    let bp_per_layer = (1..=last)
        .map(|j| {
            if j == last {
                dense_bp_output(n[j], n[j - 1], x)
            } else {
                dense_bp_hidden(n[j], n[j + 1], n[j - 1], x)
            }
        })
        .collect();
    Ok(CostBreakdown {
        fp_total,
        bp_per_layer,
    })
}

/// `(forward, backward)` FLOPs of one convolution with square `out_spatial` output.
pub fn flops_conv(
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    out_spatial: usize,
    batch: usize,
) -> (u64, u64) {
    let fp = (in_channels * kernel * kernel * out_channels * out_spatial * out_spatial) as u64
        * batch as u64;
    (fp, 2 * fp)
}

/// Cost breakdown of an arbitrary model on one batch.
pub fn flops_model(spec: &ModelSpec, batch: usize) -> CostBreakdown {
    let x = batch as u64;
    let trainable = spec.trainable_layers();
    let units = |j: usize| -> u64 {
        match spec.layers()[j] {
            Layer::Dense { output, .. } => output as u64,
            Layer::Conv2d { out_channels, .. } => out_channels as u64,
            _ => unreachable!(),
        }
    };
    let mut fp_total = 0;
    let mut bp_per_layer = Vec::with_capacity(trainable.len());
    for (l, &j) in trainable.iter().enumerate() {
        match spec.layers()[j] {
            Layer::Dense { input, output } => {
                let (n, n_down) = (output as u64, input as u64);
                fp_total += dense_fp(n, n_down, x);
                bp_per_layer.push(match trainable.get(l + 1) {
                    Some(&up) => dense_bp_hidden(n, units(up), n_down, x),
                    None => dense_bp_output(n, n_down, x),
                });
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let out = spec.shape_at(j + 1);
                let fp = (in_channels * kernel * kernel * out_channels * out[1] * out[2]) as u64 * x;
                fp_total += fp;
                bp_per_layer.push(2 * fp);
            }
            _ => unreachable!(),
        }
    }
    CostBreakdown {
        fp_total,
        bp_per_layer,
    }
}

/// FLOPs of `epochs` passes over `dataset_size` samples in batches of `batch`
/// (a trailing partial batch is charged at its own size).
pub fn flops_masked(
    spec: &ModelSpec,
    batch: usize,
    mask: &BpMask,
    epochs: usize,
    dataset_size: usize,
) -> Result<u64> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let full_batches = (dataset_size / batch) as u64;
    let rest = dataset_size % batch;
    let mut per_epoch = full_batches * flops_model(spec, batch).total(mask)?;
    if rest > 0 {
        per_epoch += flops_model(spec, rest).total(mask)?;
    }
    Ok(per_epoch * epochs as u64)
}

/// Complexity ratio of every width in the menu, narrowest first.
pub fn menu_ratios(spec: &ModelSpec, batch: usize, menu: &WidthMenu) -> Result<Vec<f64>> {
    let cost = flops_model(spec, batch);
    menu.masks().iter().map(|m| cost.ratio_to_full(m)).collect()
}

/// Compute profile of one device.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceProfile {
    pub id: usize,
    /// CPU speed as a fraction of the fastest tier.
    pub kappa: f64,
    pub dataset_size: usize,
    pub epochs: usize,
}

/// One device's share of a round: the complexity ratio of its local model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceLoad {
    pub device: usize,
    pub ratio: f64,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundTiming {
    pub per_device: Vec<(usize, f64)>,
    pub duration: f64,
}

/// Seconds for a device: `ratio · base_full_time / κ`.
pub fn device_time(ratio: f64, kappa: f64, base_full_time: f64) -> f64 {
    ratio * base_full_time / kappa
}

/// Per-device compute times and the synchronous round duration (the slowest device).
pub fn round_time(loads: &[DeviceLoad], base_full_time: f64) -> Result<RoundTiming> {
    if !(base_full_time > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "base_full_time must be positive, got {base_full_time}"
        )));
    }
    if let Some(bad) = loads.iter().find(|l| !(l.kappa > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "device {} has non-positive kappa {}",
            bad.device, bad.kappa
        )));
    }
    let per_device: Vec<(usize, f64)> = loads
        .iter()
        .map(|l| (l.device, device_time(l.ratio, l.kappa, base_full_time)))
        .collect();
    let duration = per_device.iter().map(|&(_, t)| t).fold(0.0, f64::max);
    Ok(RoundTiming {
        per_device,
        duration,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeadlineOutcome {
    pub included: Vec<usize>,
    pub duration: f64,
    /// No device finished in time; the round aggregates nothing.
    pub empty: bool,
}

/// Keeps devices finishing within `deadline`; the round lasts until the last
/// of them finishes (or the deadline when none does).
pub fn apply_deadline(per_device: &[(usize, f64)], deadline: f64) -> Result<DeadlineOutcome> {
    if !(deadline > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "deadline must be positive, got {deadline}"
        )));
    }
    let included: Vec<usize> = per_device
        .iter()
        .filter(|&&(_, t)| t <= deadline)
        .map(|&(d, _)| d)
        .collect();
    if included.is_empty() {
        return Ok(DeadlineOutcome {
            included,
            duration: deadline,
            empty: true,
        });
    }
    let latest = per_device
        .iter()
        .filter(|&&(_, t)| t <= deadline)
        .map(|&(_, t)| t)
        .fold(0.0, f64::max);
    Ok(DeadlineOutcome {
        included,
        duration: latest.min(deadline),
        empty: false,
    })
}
