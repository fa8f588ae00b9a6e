use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::cost::{apply_deadline, flops_model, menu_ratios, round_time, DeviceLoad, DeviceProfile};
use crate::data::{
    generate_synthetic_split, load_idx, partition_iid, partition_noniid_2class, Dataset,
};
use crate::error::{Error, Result};
use crate::masking::{build_width_menu, local_update, BpMask, LocalConfig, WidthMenu};
use crate::nn::{evaluate, LayerParams, ModelSpec};
use crate::strategies::{
    dropout_spec, fedavg_round, feddrop_aggregate, feddrop_generate, feddrop_match_rate,
    fedpmt_assign_option1, fedpmt_assign_option2, fedpmt_round, Participant, StrategyKind,
    WidthRule,
};

use super::config::{
    AssignOption, DatasetConfig, ExperimentConfig, PartitionKind, RuleConfig,
};

const TAG_DATA: u64 = 1;
const TAG_PARTITION: u64 = 2;
const TAG_INIT: u64 = 3;
const TAG_SAMPLE: u64 = 4;
const TAG_LOCAL: u64 = 5;
const TAG_DROP: u64 = 6;

/// Deterministic seed for one random stream; inputs are hashed with splitmix64.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// `num_selected` distinct devices out of `num_devices`, uniform and
/// determined by `(seed, round)`; returned ascending.
pub fn sample_devices(num_devices: usize, num_selected: usize, round: usize, seed: u64) -> Result<Vec<usize>> {
    if num_selected > num_devices {
        return Err(Error::InvalidArgument(format!(
            "cannot select {num_selected} of {num_devices} devices"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, TAG_SAMPLE, round as u64]));
    let mut ids = sample(&mut rng, num_devices, num_selected).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Stratified sampling: `num_selected / num_tiers` devices from every tier,
/// uniform within the tier. `tier_of[k]` is device `k`'s tier.
pub fn tier_balance(
    num_selected: usize,
    tier_of: &[usize],
    num_tiers: usize,
    round: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if num_tiers == 0 || !num_selected.is_multiple_of(num_tiers) {
        return Err(Error::InvalidArgument(format!(
            "{num_selected} devices cannot be split evenly over {num_tiers} tiers"
        )));
    }
    let per_tier = num_selected / num_tiers;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, TAG_SAMPLE, round as u64]));
    let mut ids = Vec::with_capacity(num_selected);
    for tier in 0..num_tiers {
        let members: Vec<usize> = (0..tier_of.len()).filter(|&k| tier_of[k] == tier).collect();
        if members.len() < per_tier {
            return Err(Error::InvalidArgument(format!(
                "tier {tier} has {} devices, {per_tier} needed",
                members.len()
            )));
        }
        ids.extend(
            sample(&mut rng, members.len(), per_tier)
                .into_iter()
                .map(|i| members[i]),
        );
    }
    ids.sort_unstable();
    Ok(ids)
}

/// Selected devices per tier.
pub fn tier_counts(selected: &[usize], tier_of: &[usize], num_tiers: usize) -> Vec<usize> {
    let mut counts = vec![0; num_tiers];
    for &k in selected {
        counts[tier_of[k]] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    /// 1-based.
    pub round: usize,
    pub selected: Vec<usize>,
    /// Width index per selected device (narrowest = 1).
    pub widths: BTreeMap<usize, usize>,
    pub device_seconds: BTreeMap<usize, f64>,
    pub round_seconds: f64,
    pub cumulative_seconds: f64,
    pub included: Vec<usize>,
    /// The deadline excluded every device; the model was left unchanged.
    pub empty: bool,
    pub accuracy: Option<f64>,
    pub loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub records: Vec<RoundRecord>,
    pub params: LayerParams,
    pub spec: ModelSpec,
    /// Complexity ratio of every width (or sub-model) used for timing.
    pub width_ratios: Vec<f64>,
    pub keep_rates: Option<Vec<f64>>,
}

impl ExperimentOutput {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.accuracy)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.loss)
    }
}

/// Cumulative seconds at the first evaluation reaching `target`.
pub fn time_to_accuracy(records: &[RoundRecord], target: f64) -> Option<f64> {
    records
        .iter()
        .find(|r| r.accuracy.is_some_and(|a| a >= target))
        .map(|r| r.cumulative_seconds)
}

/// Train and test data for the configured source.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetConfig::Synthetic {
            classes,
            dim,
            train_per_class,
            test_per_class,
            separation,
        } => {
            let mut v = generate_synthetic_split(
                *classes,
                *dim,
                &[*train_per_class, *test_per_class],
                *separation,
                mix_seed(&[cfg.seed, TAG_DATA]),
            )?;
            let test = v.pop().expect("two splits");
            let train = v.pop().expect("two splits");
            Ok((train, test))
        }
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => Ok((
            load_idx(train_images, train_labels)?,
            load_idx(test_images, test_labels)?,
        )),
    }
}

struct Plan {
    spec: ModelSpec,
    menu: WidthMenu,
    /// Timing ratio per width.
    ratios: Vec<f64>,
    keep_rates: Option<Vec<f64>>,
    rule: WidthRule,
    tier_of: Vec<usize>,
}

fn plan(cfg: &ExperimentConfig, train: &Dataset) -> Result<Plan> {
    let spec = cfg.build_model(train.sample_shape(), train.classes())?;
    let s = &cfg.strategy;
    let widths = if s.kind == StrategyKind::Fedavg { 1 } else { s.widths };
    let counts = if s.kind == StrategyKind::Fedavg {
        None
    } else {
        s.layer_counts.as_deref()
    };
    let menu = build_width_menu(spec.trainable_count(), widths, counts)?;
    let batch = cfg.training.batch_size;
    let menu_ratios = match &s.complexity_ratios {
        Some(r) if s.kind != StrategyKind::Fedavg => r.clone(),
        _ => menu_ratios(&spec, batch, &menu)?,
    };
    let (ratios, keep_rates) = match s.kind {
        StrategyKind::Fedpmt | StrategyKind::Fedavg => (menu_ratios, None),
        StrategyKind::Feddrop => {
            let full = flops_model(&spec, batch).full();
            let rates = match &s.keep_rates {
                Some(r) => r.clone(),
                None => menu_ratios
                    .iter()
                    .map(|&r| {
                        let target = ((r * full as f64).round() as u64).min(full);
                        feddrop_match_rate(target, &spec, batch)
                    })
                    .collect::<Result<_>>()?,
            };
            let ratios = rates
                .iter()
                .map(|&r| {
                    let sub = dropout_spec(&spec, r)?;
                    Ok(flops_model(&sub, batch).full() as f64 / full as f64)
                })
                .collect::<Result<_>>()?;
            (ratios, Some(rates))
        }
    };
    let tiers = &cfg.timing.tiers;
    let rule = match s.rule {
        RuleConfig::TierRank => WidthRule::tier_rank(tiers),
        RuleConfig::Budget { seconds } => WidthRule::Budget {
            seconds,
            base_full_time: cfg.timing.base_full_time,
        },
    };
    let tier_of = (0..cfg.partition.devices).map(|k| k % tiers.len()).collect();
    Ok(Plan {
        spec,
        menu,
        ratios,
        keep_rates,
        rule,
        tier_of,
    })
}

/// Runs the configured experiment end to end.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let (train, test) = load_data(cfg)?;
    run_experiment_on(cfg, &train, &test)
}

/// Runs the experiment on already loaded data.
pub fn run_experiment_on(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let flat = matches!(cfg.model, super::config::ModelConfig::Fcnn { .. })
        || matches!(cfg.model, super::config::ModelConfig::FcnnMnist);
    let (train, test) = if flat {
        (train.flattened(), test.flattened())
    } else {
        (train.clone(), test.clone())
    };
    let plan = plan(cfg, &train)?;
    let spec = &plan.spec;

    let p = &cfg.partition;
    let part_seed = mix_seed(&[cfg.seed, TAG_PARTITION]);
    let partition = match p.kind {
        PartitionKind::Iid => partition_iid(&train, p.devices, p.per_device, part_seed)?,
        PartitionKind::Noniid2 => partition_noniid_2class(&train, p.devices, p.per_device, part_seed)?,
    };
    let device_data = partition.materialize(&train)?;

    let t = &cfg.training;
    let tiers = &cfg.timing.tiers;
    let mut global = LayerParams::init(spec, mix_seed(&[cfg.seed, TAG_INIT]));
    let mut records = Vec::with_capacity(t.rounds);
    let mut cumulative = 0.0;

    for round in 1..=t.rounds {
        let selected = if cfg.timing.balanced {
            tier_balance(t.selected, &plan.tier_of, tiers.len(), round, cfg.seed)?
        } else {
            sample_devices(p.devices, t.selected, round, cfg.seed)?
        };

        let widths: BTreeMap<usize, usize> = if cfg.strategy.kind == StrategyKind::Fedavg {
            selected.iter().map(|&k| (k, 1)).collect()
        } else {
            let profiles: Vec<DeviceProfile> = selected
                .iter()
                .map(|&k| DeviceProfile {
                    id: k,
                    kappa: tiers[plan.tier_of[k]],
                    dataset_size: device_data[k].len(),
                    epochs: t.epochs,
                })
                .collect();
            match cfg.strategy.option {
                AssignOption::Server => {
                    fedpmt_assign_option1(&profiles, &plan.menu, &plan.ratios, &plan.rule)?.widths
                }
                AssignOption::Device => {
                    let caps: Vec<(usize, f64)> =
                        profiles.iter().map(|d| (d.id, d.kappa)).collect();
                    fedpmt_assign_option2(&caps, &plan.menu, &plan.ratios, &plan.rule)?.widths
                }
            }
        };

        let loads: Vec<DeviceLoad> = selected
            .iter()
            .map(|&k| DeviceLoad {
                device: k,
                ratio: plan.ratios[widths[&k] - 1],
                kappa: tiers[plan.tier_of[k]],
            })
            .collect();
        let timing = round_time(&loads, cfg.timing.base_full_time)?;
        let (included, round_seconds, empty) = match cfg.timing.deadline {
            Some(d) => {
                let o = apply_deadline(&timing.per_device, d)?;
                (o.included, o.duration, o.empty)
            }
            None => (selected.clone(), timing.duration, false),
        };
        cumulative += round_seconds;

        if !empty {
            let eta = t.lr.at(round);
            let local_cfg = |k: usize| LocalConfig {
                step_size: eta,
                steps: t
                    .steps
                    .unwrap_or(t.epochs * device_data[k].len().div_ceil(t.batch_size)),
                batch_size: t.batch_size,
                seed: mix_seed(&[cfg.seed, TAG_LOCAL, round as u64, k as u64]),
            };
            global = match cfg.strategy.kind {
                StrategyKind::Fedpmt | StrategyKind::Fedavg => {
                    let participants: Vec<Participant<'_>> = included
                        .iter()
                        .map(|&k| Participant {
                            device: k,
                            data: &device_data[k],
                            mask: plan.menu.mask(widths[&k]).clone(),
                            local: local_cfg(k),
                        })
                        .collect();
                    if cfg.strategy.kind == StrategyKind::Fedavg {
                        fedavg_round(spec, &global, &participants)?.params
                    } else {
                        fedpmt_round(spec, &global, &participants)?.params
                    }
                }
                StrategyKind::Feddrop => {
                    let rates = plan.keep_rates.as_ref().expect("feddrop has rates");
                    let results: Vec<_> = included
                        .par_iter()
                        .map(|&k| {
                            let rate = rates[widths[&k] - 1];
                            let (sub, dp) = feddrop_generate(
                                spec,
                                &global,
                                rate,
                                mix_seed(&[cfg.seed, TAG_DROP, round as u64, k as u64]),
                            )?;
                            let full = BpMask::all_ones(dp.sub_spec.trainable_count());
                            let u = local_update(&dp.sub_spec, &sub, &device_data[k], &full, &local_cfg(k))?;
                            Ok((u.delta, dp))
                        })
                        .collect::<Result<_>>()?;
                    let pairs: Vec<_> = results.iter().map(|(d, p)| (d, p)).collect();
                    feddrop_aggregate(&global, &pairs)?
                }
            };
        }

        let (accuracy, loss) = if round % t.eval_every == 0 || round == t.rounds {
            let e = evaluate(spec, &global, test.features(), test.labels())?;
            (Some(e.accuracy), Some(e.mean_loss))
        } else {
            (None, None)
        };

        records.push(RoundRecord {
            round,
            device_seconds: timing.per_device.iter().copied().collect(),
            selected,
            widths,
            round_seconds,
            cumulative_seconds: cumulative,
            included,
            empty,
            accuracy,
            loss,
        });
    }

    Ok(ExperimentOutput {
        records,
        params: global,
        spec: plan.spec,
        width_ratios: plan.ratios,
        keep_rates: plan.keep_rates,
    })
}
