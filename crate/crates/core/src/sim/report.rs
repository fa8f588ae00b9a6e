use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::cost::{flops_model, menu_ratios};
use crate::error::Result;
use crate::masking::WidthMenu;
use crate::nn::ModelSpec;
use crate::strategies::{dropout_spec, feddrop_match_rate};

use super::config::ExperimentConfig;
use super::run::{time_to_accuracy, ExperimentOutput, RoundRecord};

pub const METRICS_HEADER: &str =
    "round,cumulative_seconds,round_seconds,num_selected,num_included,accuracy,loss";

/// One row per round; accuracy and loss are blank on rounds without evaluation.
pub fn metrics_csv(records: &[RoundRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in records {
        writeln!(
            out,
            "{},{:.6},{:.6},{},{},{},{}",
            r.round,
            r.cumulative_seconds,
            r.round_seconds,
            r.selected.len(),
            if r.empty { 0 } else { r.included.len() },
            opt(r.accuracy),
            opt(r.loss)
        )
        .expect("writing to a String");
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct TargetTime {
    pub target: f64,
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub seed: u64,
    pub final_accuracy: Option<f64>,
    pub final_loss: Option<f64>,
    pub total_seconds: f64,
    pub rounds: usize,
    pub empty_rounds: usize,
    pub width_ratios: Vec<f64>,
    pub keep_rates: Option<Vec<f64>>,
    pub time_to_accuracy: Vec<TargetTime>,
    pub config: ExperimentConfig,
}

pub fn summarize(cfg: &ExperimentConfig, out: &ExperimentOutput) -> Summary {
    Summary {
        seed: cfg.seed,
        final_accuracy: out.final_accuracy(),
        final_loss: out.final_loss(),
        total_seconds: out.records.last().map_or(0.0, |r| r.cumulative_seconds),
        rounds: out.records.len(),
        empty_rounds: out.records.iter().filter(|r| r.empty).count(),
        width_ratios: out.width_ratios.clone(),
        keep_rates: out.keep_rates.clone(),
        time_to_accuracy: cfg
            .targets
            .iter()
            .map(|&target| TargetTime {
                target,
                seconds: time_to_accuracy(&out.records, target),
            })
            .collect(),
        config: cfg.clone(),
    }
}

/// Writes `metrics.csv`, `rounds.jsonl` and `summary.json` into `dir`.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, out: &ExperimentOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv(&out.records))?;
    let mut lines = String::new();
    for r in &out.records {
        lines.push_str(&serde_json::to_string(r).expect("record serializes"));
        lines.push('\n');
    }
    std::fs::write(dir.join("rounds.jsonl"), lines)?;
    let summary = serde_json::to_string_pretty(&summarize(cfg, out)).expect("summary serializes");
    std::fs::write(dir.join("summary.json"), summary + "\n")?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub width: usize,
    pub mask: String,
    pub flops: u64,
    pub ratio: f64,
    /// Against an externally quoted full-model total, when one is given.
    pub ratio_quoted: Option<f64>,
    pub feddrop_keep_rate: f64,
    pub feddrop_flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub architecture: String,
    pub batch: usize,
    pub full_flops: u64,
    pub quoted_full: Option<u64>,
    pub rows: Vec<CostRow>,
}

/// Per-width totals and ratios plus the FLOP-matched dropout rate of each width.
pub fn cost_report(
    architecture: &str,
    spec: &ModelSpec,
    batch: usize,
    menu: &WidthMenu,
    quoted_full: Option<u64>,
) -> Result<CostReport> {
    let cost = flops_model(spec, batch);
    let ratios = menu_ratios(spec, batch, menu)?;
    let rows = menu
        .masks()
        .iter()
        .zip(ratios)
        .enumerate()
        .map(|(i, (mask, ratio))| {
            let flops = cost.total(mask)?;
            let rate = feddrop_match_rate(flops, spec, batch)?;
            let feddrop_flops = flops_model(&dropout_spec(spec, rate)?, batch).full();
            Ok(CostRow {
                width: i + 1,
                mask: mask.to_string(),
                flops,
                ratio,
                ratio_quoted: quoted_full.map(|q| flops as f64 / q as f64),
                feddrop_keep_rate: rate,
                feddrop_flops,
            })
        })
        .collect::<Result<_>>()?;
    Ok(CostReport {
        architecture: architecture.to_string(),
        batch,
        full_flops: cost.full(),
        quoted_full,
        rows,
    })
}

impl CostReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{} (batch {})", self.architecture, self.batch).unwrap();
        writeln!(
            out,
            "{:>5}  {:<18} {:>14} {:>8} {:>8} {:>9} {:>14}",
            "width", "bp mask", "flops", "ratio", "quoted", "drop keep", "drop flops"
        )
        .unwrap();
        for r in &self.rows {
            let quoted = r
                .ratio_quoted
                .map(|q| format!("{:.2}%", 100.0 * q))
                .unwrap_or_else(|| "-".into());
            writeln!(
                out,
                "{:>5}  {:<18} {:>14} {:>7.2}% {:>8} {:>8.2}% {:>14}",
                r.width,
                r.mask,
                r.flops,
                100.0 * r.ratio,
                quoted,
                100.0 * r.feddrop_keep_rate,
                r.feddrop_flops
            )
            .unwrap();
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "architecture,batch,width,mask,flops,ratio,ratio_quoted,feddrop_keep_rate,feddrop_flops\n",
        );
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},\"{}\",{},{:.6},{},{:.6},{}",
                self.architecture,
                self.batch,
                r.width,
                r.mask,
                r.flops,
                r.ratio,
                r.ratio_quoted.map(|q| format!("{q:.6}")).unwrap_or_default(),
                r.feddrop_keep_rate,
                r.feddrop_flops
            )
            .unwrap();
        }
        out
    }
}
