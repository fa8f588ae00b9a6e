use rayon::prelude::*;

use crate::aggregation::aggregate;
use crate::data::Dataset;
use crate::error::Result;
use crate::masking::{local_update, BpMask, LocalConfig, LocalUpdate};
use crate::nn::{LayerParams, ModelSpec};

/// One selected device in a round.
#[derive(Debug, Clone)]
pub struct Participant<'a> {
    pub device: usize,
    pub data: &'a Dataset,
    pub mask: BpMask,
    pub local: LocalConfig,
}

#[derive(Debug, Clone)]
pub struct RoundResult {
    pub params: LayerParams,
    pub updates: Vec<LocalUpdate>,
}

/// Local updates (run in parallel, each pure given its seed) followed by
/// layer-wise aggregation in ascending device order.
pub fn fedpmt_round(
    spec: &ModelSpec,
    global: &LayerParams,
    participants: &[Participant<'_>],
) -> Result<RoundResult> {
    let mut order: Vec<&Participant<'_>> = participants.iter().collect();
    order.sort_by_key(|p| p.device);
    let updates: Vec<LocalUpdate> = order
        .par_iter()
        .map(|p| local_update(spec, global, p.data, &p.mask, &p.local))
        .collect::<Result<_>>()?;
    let deltas: Vec<_> = updates.iter().map(|u| &u.delta).collect();
    let masks: Vec<BpMask> = order.iter().map(|p| p.mask.clone()).collect();
    let params = aggregate(global, &deltas, &masks)?;
    Ok(RoundResult { params, updates })
}

/// FedAvg: every participant trains the full model.
pub fn fedavg_round(
    spec: &ModelSpec,
    global: &LayerParams,
    participants: &[Participant<'_>],
) -> Result<RoundResult> {
    let full: Vec<Participant<'_>> = participants
        .iter()
        .map(|p| Participant {
            mask: BpMask::all_ones(spec.trainable_count()),
            ..p.clone()
        })
        .collect();
    fedpmt_round(spec, global, &full)
}
