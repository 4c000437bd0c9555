//! Command-line surface: `prune`, `quantize`, `joint`, `simulate`, `eval`
//! and `report`.
//!
//! Exit status is 0 on success, 1 for usage errors, 2 for data errors and
//! 3 when training diverges.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::hwsim::{report_block, SimConfig};
use crate::importance::Metric;
use crate::io::config::RunConfig;
use crate::io::report::{
    prune_lines, read_jsonl, sim_lines, write_curve, write_jsonl, RunStanza, CURVE_FILE, REPORT_FILE,
};
use crate::io::{
    load_checkpoint, read_mask_set, synth_model, write_mask_set, write_quant_set, CalibrationSet, IoError,
    Provenance,
};
use crate::model::{perplexity_masked, Layers, ModelCheckpoint};
use crate::pruner::{prune_model, PenaltyKind, PruneError, Scope, Task};
use crate::quant::{quantize, QuantParams};
use crate::sparsity::{Granularity, PruneMask};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "besa", version, about = "Learned sparsity allocation for transformer pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn per-row (or per-layer) sparsity block by block and write masks.
    Prune(TrainArgs),
    /// Learn quantization clipping strengths only.
    Quantize(TrainArgs),
    /// Learn sparsity and clipping strengths together.
    Joint(TrainArgs),
    /// Estimate accelerator cycles and speedups from mask files.
    Simulate(SimulateArgs),
    /// Perplexity on held-out tokens before and after masking.
    Eval(EvalArgs),
    /// Merge the artifacts of a run directory into one summary.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GranularityArg {
    #[value(alias = "per_row", alias = "per-row")]
    Row,
    #[value(alias = "per_layer", alias = "per-layer")]
    Layer,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScopeArg {
    Layer,
    #[value(alias = "attn_mlp")]
    AttnMlp,
    Block,
    #[value(alias = "two_blocks")]
    TwoBlocks,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricArg {
    Wanda,
    Magnitude,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PenaltyArg {
    #[value(alias = "zero_count")]
    ZeroCount,
    Surrogate,
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint directory (manifest.json + weights.bin).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Token file of little-endian u32 ids.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Use 16 calibration sequences of 128 tokens.
    #[arg(long)]
    desk_scale: bool,
    #[arg(long)]
    calib_sequences: Option<usize>,
    #[arg(long)]
    calib_tokens: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Target fraction of zeros in every block.
    #[arg(long)]
    sparsity: Option<f64>,
    #[arg(long, value_enum)]
    granularity: Option<GranularityArg>,
    #[arg(long, value_enum)]
    scope: Option<ScopeArg>,
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
    #[arg(long, value_enum)]
    penalty: Option<PenaltyArg>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Spacing of the candidate rate grid.
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    bits: Option<u32>,
    /// Targets from a separately propagated dense stream.
    #[arg(long)]
    two_stream: bool,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Directory holding masks.json and mask files.
    #[arg(long)]
    masks: PathBuf,
    /// TOML file with simulator keys.
    #[arg(long)]
    sim_config: Option<PathBuf>,
    #[arg(long)]
    tokens: Option<u64>,
    /// Where to write sim.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long)]
    eval_sequences: Option<usize>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directory written by prune, quantize or joint.
    #[arg(long)]
    run: PathBuf,
}

enum Failure {
    Usage(String),
    Data(String),
    Diverged(String),
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Config(m) => Failure::Usage(m),
            other => Failure::Data(other.to_string()),
        }
    }
}

impl From<PruneError> for Failure {
    fn from(e: PruneError) -> Self {
        match e {
            PruneError::Config(m) => Failure::Usage(m),
            d @ PruneError::Divergence { .. } => Failure::Diverged(d.to_string()),
            other => Failure::Data(other.to_string()),
        }
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Prune(a) => train(a, Task::Prune),
        Command::Quantize(a) => train(a, Task::Quantize),
        Command::Joint(a) => train(a, Task::Joint),
        Command::Simulate(a) => simulate(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            EXIT_DATA
        }
        Err(Failure::Diverged(m)) => {
            eprintln!("error: {m}");
            EXIT_DIVERGED
        }
    }
}

fn resolve_common(c: &CommonArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &c.checkpoint {
        cfg.checkpoint = Some(p.clone());
    }
    if let Some(p) = &c.calib {
        cfg.calib_file = Some(p.clone());
    }
    cfg.desk_scale |= c.desk_scale;
    if let Some(v) = c.calib_sequences {
        cfg.calib_sequences = v;
        cfg.desk_scale = false;
    }
    if let Some(v) = c.calib_tokens {
        cfg.calib_tokens = v;
        cfg.desk_scale = false;
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(p) = &c.out {
        cfg.out_dir = p.clone();
    }
    Ok(cfg)
}

fn resolve_train(a: &TrainArgs) -> Result<RunConfig, Failure> {
    let mut cfg = resolve_common(&a.common)?;
    if let Some(v) = a.sparsity {
        cfg.target_sparsity = v;
    }
    if let Some(g) = a.granularity {
        cfg.granularity = match g {
            GranularityArg::Row => Granularity::PerRow,
            GranularityArg::Layer => Granularity::PerLayer,
        };
    }
    if let Some(s) = a.scope {
        cfg.scope = match s {
            ScopeArg::Layer => Scope::Layer,
            ScopeArg::AttnMlp => Scope::AttnMlp,
            ScopeArg::Block => Scope::Block,
            ScopeArg::TwoBlocks => Scope::TwoBlocks,
        };
    }
    if let Some(m) = a.metric {
        cfg.metric = match m {
            MetricArg::Wanda => Metric::Wanda,
            MetricArg::Magnitude => Metric::Magnitude,
        };
    }
    if let Some(p) = a.penalty {
        cfg.penalty = match p {
            PenaltyArg::ZeroCount => PenaltyKind::ZeroCount,
            PenaltyArg::Surrogate => PenaltyKind::Surrogate,
        };
    }
    if let Some(v) = a.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.max_steps {
        cfg.max_steps = Some(v);
    }
    if let Some(v) = a.step {
        cfg.sparsity_step = v;
    }
    if let Some(v) = a.bits {
        cfg.quant_bits = v;
    }
    cfg.two_stream |= a.two_stream;
    cfg.prune_config().validate()?;
    Ok(cfg)
}

fn load_model(cfg: &RunConfig) -> Result<ModelCheckpoint, Failure> {
    match &cfg.checkpoint {
        Some(p) => Ok(load_checkpoint(p)?),
        None => {
            let bc = cfg.block_config();
            bc.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            if cfg.synth_blocks == 0 || cfg.vocab == 0 {
                return Err(Failure::Usage("synth_blocks and vocab must be >= 1".into()));
            }
            Ok(synth_model(&bc, cfg.synth_blocks, cfg.vocab, cfg.synth_seed))
        }
    }
}

/// Calibration set, or the held-out set that follows it when `held_out`.
fn load_tokens(cfg: &RunConfig, vocab: usize, held_out: bool) -> Result<CalibrationSet, Failure> {
    let (n, len) = cfg.calibration_size();
    if n == 0 || len == 0 {
        return Err(Failure::Usage("calibration size must be >= 1".into()));
    }
    let count = if held_out { cfg.eval_sequences } else { n };
    if count == 0 {
        return Err(Failure::Usage("eval_sequences must be >= 1".into()));
    }
    match &cfg.calib_file {
        None => Ok(CalibrationSet::synthetic_stream(count, len, vocab, cfg.calib_seed, held_out as u64)),
        Some(p) => {
            if !held_out {
                return Ok(CalibrationSet::from_file(p, n, len, vocab)?);
            }
            let all = CalibrationSet::from_file(p, n + count, len, vocab)?;
            let tokens = all.tokens()[n * len..].to_vec();
            Ok(CalibrationSet::new(tokens, count, len, Provenance::File(p.clone())).expect("sizes match"))
        }
    }
}

fn train(a: TrainArgs, task: Task) -> Result<(), Failure> {
    let cfg = resolve_train(&a)?;
    let model = load_model(&cfg)?;
    let calib = load_tokens(&cfg, model.vocab, false)?;
    let pc = cfg.prune_config();
    let run = prune_model(&model, &calib, &pc, task)?;

    let out = &cfg.out_dir;
    let name = match task {
        Task::Prune => "prune",
        Task::Quantize => "quantize",
        Task::Joint => "joint",
    };
    RunStanza::new(name, &cfg).write(out)?;
    let mut lines = prune_lines(&run, if task.prunes() { cfg.target_sparsity } else { 0.0 });
    if task.prunes() {
        write_mask_set(&out.join("masks"), &run.masks)?;
    }
    if let Some(q) = &run.quant {
        let quantized = quantized_layers(&model, q)?;
        write_quant_set(&out.join("quant"), &quantized, cfg.quant_bits, task.prunes())?;
        let flagged: usize = quantized.iter().flat_map(|l| l.0.iter()).map(|q| q.passthrough.iter().filter(|&&p| p).count()).sum();
        lines.push(json!({"kind": "quant", "bits": cfg.quant_bits, "passthrough_channels": flagged}));
    }
    write_jsonl(&out.join(REPORT_FILE), &lines)?;
    write_curve(&out.join(CURVE_FILE), &run.curve)?;

    println!("{name}: {} blocks, global sparsity {:.4}", run.masks.len(), run.global_sparsity());
    for r in &run.reports {
        println!(
            "  block {:>2}: recon {:.6}  sparsity {:.4}  steps {}{}",
            r.block,
            r.recon_loss,
            r.block_sparsity,
            r.steps,
            if r.converged { "  (converged)" } else { "" }
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn quantized_layers(
    m: &ModelCheckpoint,
    q: &[Layers<QuantParams>],
) -> Result<Vec<Layers<crate::quant::Quantized>>, Failure> {
    m.blocks
        .iter()
        .zip(q)
        .map(|(b, qp)| {
            Layers::try_from_fn(|l| quantize(&b.layers[l], &qp[l]).map_err(|e| Failure::Data(e.to_string())))
        })
        .collect()
}

fn simulate(a: SimulateArgs) -> Result<(), Failure> {
    let mut sim = match &a.sim_config {
        Some(p) => RunConfig::load_sim_config(p)?,
        None => SimConfig::default(),
    };
    if let Some(t) = a.tokens {
        sim.tokens = t;
    }
    sim.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let masks = read_mask_set(&a.masks)?;
    let report = report_block(&masks, &sim).map_err(|e| Failure::Data(e.to_string()))?;
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        write_jsonl(&out.join("sim.jsonl"), &sim_lines(&report))?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let mut cfg = resolve_common(&a.common)?;
    if let Some(n) = a.eval_sequences {
        cfg.eval_sequences = n;
    }
    let model = load_model(&cfg)?;
    let held = load_tokens(&cfg, model.vocab, true)?;
    let masks: Option<Vec<Layers<PruneMask>>> = a.masks.as_deref().map(read_mask_set).transpose()?;
    if let Some(ms) = &masks {
        if ms.len() != model.n_blocks() {
            return Err(Failure::Data(format!(
                "mask set covers {} blocks, model has {}",
                ms.len(),
                model.n_blocks()
            )));
        }
    }
    let mean_ppl = |masks: Option<&[Layers<PruneMask>]>| -> Result<f64, Failure> {
        let mut total = 0.0;
        for s in held.sequences() {
            total += perplexity_masked(&model, s, masks, None).map_err(|e| Failure::Data(e.to_string()))?.ln();
        }
        Ok((total / held.n_sequences() as f64).exp())
    };
    let dense = mean_ppl(None)?;
    println!("dense perplexity  {dense:.4}");
    let mut line = json!({"kind": "eval", "sequences": held.n_sequences(), "dense_perplexity": dense});
    if let Some(ms) = &masks {
        let pruned = mean_ppl(Some(ms))?;
        println!("masked perplexity {pruned:.4}");
        line["masked_perplexity"] = json!(pruned);
    }
    write_jsonl(&cfg.out_dir.join("eval.jsonl"), &[line])?;
    Ok(())
}

fn report(a: ReportArgs) -> Result<(), Failure> {
    let stanza = RunStanza::read(&a.run)?;
    let lines = read_jsonl(&a.run.join(REPORT_FILE))?;
    let mut text = String::new();
    let _ = writeln!(text, "run: {} (seed {}, format {})", stanza.command, stanza.seed, stanza.format_version);
    let _ = writeln!(text, "target sparsity: {}", stanza.config.target_sparsity);
    let _ = writeln!(text, "\n{:<24}{:>12}", "layer", "sparsity");
    for l in lines.iter().filter(|l| l["kind"] == "layer") {
        let _ = writeln!(
            text,
            "{:<24}{:>11.2}%",
            l["name"].as_str().unwrap_or("?"),
            100.0 * l["achieved_sparsity"].as_f64().unwrap_or(f64::NAN)
        );
    }
    let _ = writeln!(text, "\n{:<8}{:>14}{:>12}{:>8}", "block", "recon", "sparsity", "steps");
    for l in lines.iter().filter(|l| l["kind"] == "block") {
        let _ = writeln!(
            text,
            "{:<8}{:>14.6}{:>12.4}{:>8}",
            l["block"],
            l["recon_loss"].as_f64().unwrap_or(f64::NAN),
            l["block_sparsity"].as_f64().unwrap_or(f64::NAN),
            l["steps"]
        );
    }
    if let Some(t) = lines.iter().find(|l| l["kind"] == "total") {
        let _ = writeln!(text, "\nglobal sparsity: {}", t["global_sparsity"]);
    }
    for extra in ["sim.jsonl", "eval.jsonl"] {
        let p = a.run.join(extra);
        if p.exists() {
            for l in read_jsonl(&p)? {
                let _ = writeln!(text, "{extra}: {l}");
            }
        }
    }
    let _ = writeln!(text, "\nloss curve: {}", a.run.join(CURVE_FILE).display());
    print!("{text}");
    crate::io::write_file(&a.run.join("summary.txt"), text.as_bytes())?;
    Ok(())
}
