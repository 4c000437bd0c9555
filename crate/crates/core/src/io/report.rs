//! Line-oriented run reports.
//!
//! `report.jsonl` holds one JSON object per line, each with a `kind` field
//! (`block`, `layer`, `total`, `sim_layer`, `eval`). `curve.tsv` holds the
//! per-step training curve with columns `block step recon penalty achieved`.
//! `run.json` is the reproducibility stanza. Wall-clock times are never
//! written, so reports of identical runs are byte-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{format_err, read_file, write_file, IoError, FORMAT_VERSION};
use super::config::RunConfig;
use crate::hwsim::SimReport;
use crate::pruner::{BlockLossReport, PrunedModel, StepRecord};

pub const REPORT_FILE: &str = "report.jsonl";
pub const CURVE_FILE: &str = "curve.tsv";
pub const RUN_FILE: &str = "run.json";

pub fn write_jsonl(path: &Path, lines: &[Value]) -> Result<(), IoError> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&serde_json::to_string(l).expect("value serializes"));
        text.push('\n');
    }
    write_file(path, text.as_bytes())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Value>, IoError> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| format_err(path, e.to_string()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| format_err(path, e.to_string())))
        .collect()
}

/// Block, layer and total lines for a pruning run.
pub fn prune_lines(run: &PrunedModel, target: f64) -> Vec<Value> {
    let mut lines = Vec::new();
    for r in &run.reports {
        lines.push(block_line(r));
        for (name, s) in &r.achieved_sparsity {
            lines.push(json!({"kind": "layer", "format_version": FORMAT_VERSION, "name": name, "achieved_sparsity": s}));
        }
    }
    let steps: usize = run.reports.iter().map(|r| r.steps).sum();
    lines.push(json!({
        "kind": "total",
        "format_version": FORMAT_VERSION,
        "target_sparsity": target,
        "global_sparsity": run.global_sparsity(),
        "n_blocks": run.masks.len(),
        "steps": steps,
    }));
    lines
}

fn block_line(r: &BlockLossReport) -> Value {
    let mut v = serde_json::to_value(r).expect("report serializes");
    let obj = v.as_object_mut().expect("object");
    obj.insert("kind".into(), json!("block"));
    obj.insert("format_version".into(), json!(FORMAT_VERSION));
    v
}

pub fn sim_lines(report: &SimReport) -> Vec<Value> {
    let mut lines: Vec<Value> = report
        .layers
        .iter()
        .map(|l| {
            let mut v = serde_json::to_value(l).expect("layer serializes");
            v.as_object_mut().expect("object").insert("kind".into(), json!("sim_layer"));
            v
        })
        .collect();
    lines.push(json!({
        "kind": "sim_total",
        "format_version": FORMAT_VERSION,
        "n_blocks": report.n_blocks,
        "tokens": report.tokens,
        "mean_speedup": report.mean_speedup,
    }));
    lines
}

pub fn write_curve(path: &Path, curve: &[StepRecord]) -> Result<(), IoError> {
    let mut text = String::from("block\tstep\trecon\tpenalty\tachieved\n");
    for c in curve {
        text.push_str(&format!(
            "{}\t{}\t{:e}\t{:e}\t{}\n",
            c.block, c.step, c.recon, c.penalty, c.achieved
        ));
    }
    write_file(path, text.as_bytes())
}

/// Everything needed to regenerate a run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunStanza {
    pub format_version: u32,
    pub crate_version: String,
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
}

impl RunStanza {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed: config.seed,
            config: config.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), IoError> {
        write_file(
            &dir.join(RUN_FILE),
            &serde_json::to_vec_pretty(self).expect("stanza serializes"),
        )
    }

    pub fn read(dir: &Path) -> Result<Self, IoError> {
        let path = dir.join(RUN_FILE);
        serde_json::from_slice(&read_file(&path)?).map_err(|e| format_err(&path, e.to_string()))
    }
}
