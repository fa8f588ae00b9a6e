//! Federated training strategies: FedPMT (partial back-propagation), FedAvg,
//! and the federated-dropout baseline.

mod assign;
pub mod feddrop;
mod round;

use serde::{Deserialize, Serialize};

pub use assign::{
    fedpmt_assign_option1, fedpmt_assign_option2, Provenance, WidthAssignment, WidthRule,
};
pub use feddrop::{
    dropout_spec, feddrop_aggregate, feddrop_generate, feddrop_match_rate, DropoutPlan,
};
pub use round::{fedavg_round, fedpmt_round, Participant, RoundResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Fedpmt,
    Fedavg,
    Feddrop,
}
