use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cost::{device_time, DeviceProfile};
use crate::error::{Error, Result};
use crate::masking::WidthMenu;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    ServerAssigned,
    DeviceChosen,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WidthAssignment {
    /// Device id → width (1-based).
    pub widths: BTreeMap<usize, usize>,
    pub provenance: Provenance,
    /// Devices for which no width fit; they were given width 1.
    pub flagged: Vec<usize>,
}

/// How a device's compute level maps onto a width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum WidthRule {
    /// The known compute levels, slowest first, are lined up with the widths
    /// so that the fastest level trains the full model, the next slower one
    /// the next narrower width, and so on.
    TierRank { ladder: Vec<f64> },
    /// Largest width whose compute time `ratio · base / κ` fits the budget.
    Budget { seconds: f64, base_full_time: f64 },
}

impl WidthRule {
    pub fn tier_rank(levels: &[f64]) -> Self {
        let mut ladder = levels.to_vec();
        ladder.sort_by(f64::total_cmp);
        ladder.dedup();
        WidthRule::TierRank { ladder }
    }

    /// `(width, flagged)` for a device with speed `kappa`.
    pub fn width_for(&self, kappa: f64, ratios: &[f64]) -> (usize, bool) {
        let widths = ratios.len();
        match self {
            WidthRule::TierRank { ladder } => {
                let Some(rank) = ladder.iter().rposition(|&level| level <= kappa * (1.0 + 1e-12))
                else {
                    return (1, true);
                };
                let below_top = ladder.len() - 1 - rank;
                if below_top >= widths {
                    (1, true)
                } else {
                    (widths - below_top, false)
                }
            }
            WidthRule::Budget {
                seconds,
                base_full_time,
            } => {
                let limit = seconds * (1.0 + 1e-12);
                match (1..=widths)
                    .rev()
                    .find(|&i| device_time(ratios[i - 1], kappa, *base_full_time) <= limit)
                {
                    Some(i) => (i, false),
                    None => (1, true),
                }
            }
        }
    }
}

fn check_ratios(menu: &WidthMenu, ratios: &[f64]) -> Result<()> {
    if ratios.len() != menu.num_widths() {
        return Err(Error::InvalidArgument(format!(
            "{} complexity ratios for {} widths",
            ratios.len(),
            menu.num_widths()
        )));
    }
    Ok(())
}

/// Option I: devices report their compute level and the server assigns widths.
pub fn fedpmt_assign_option1(
    profiles: &[DeviceProfile],
    menu: &WidthMenu,
    ratios: &[f64],
    rule: &WidthRule,
) -> Result<WidthAssignment> {
    check_ratios(menu, ratios)?;
    let mut widths = BTreeMap::new();
    let mut flagged = Vec::new();
    for p in profiles {
        let (w, flag) = rule.width_for(p.kappa, ratios);
        widths.insert(p.id, w);
        if flag {
            flagged.push(p.id);
        }
    }
    Ok(WidthAssignment {
        widths,
        provenance: Provenance::ServerAssigned,
        flagged,
    })
}

/// Option II: the menu is broadcast and every device picks its own width;
/// the chosen mask travels back with the update.
pub fn fedpmt_assign_option2(
    device_caps: &[(usize, f64)],
    menu: &WidthMenu,
    ratios: &[f64],
    rule: &WidthRule,
) -> Result<WidthAssignment> {
    check_ratios(menu, ratios)?;
    let choices: Vec<(usize, usize, bool)> = device_caps
        .iter()
        .map(|&(id, kappa)| {
            let (w, flag) = rule.width_for(kappa, ratios);
            (id, w, flag)
        })
        .collect();
    Ok(WidthAssignment {
        widths: choices.iter().map(|&(id, w, _)| (id, w)).collect(),
        provenance: Provenance::DeviceChosen,
        flagged: choices
            .iter()
            .filter(|c| c.2)
            .map(|&(id, _, _)| id)
            .collect(),
    })
}
