use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use super::checkpoint::{load_checkpoint, resolve_checkpoint_dir, Checkpoint};
use super::config::{RunConfig, Task};
use super::eval::{encode_dataset, evaluate, parse_metrics, splits_for};
use super::gradsuite::run_suite;
use super::train::train;
use crate::analysis::{
    export_attention, score_slots_retrieval, select_top_k, train_mask, AttnFilter, Granularity, MaskTrainConfig,
    SlotScores,
};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Stream};

#[derive(Parser, Debug)]
#[command(name = "sparo", version, about = "Train and analyse separate-head read-out encoders on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a contrastive or self-distillation model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Score slots and select a subset.
    Slots {
        #[command(subcommand)]
        cmd: SlotsCommand,
    },
    /// Learn a global mask over slots or dimensions.
    Mask {
        #[command(subcommand)]
        cmd: MaskCommand,
    },
    /// Dump per-slot attention maps.
    Attn {
        #[command(subcommand)]
        cmd: AttnCommand,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Tape the analytic gradients in 64-bit instead of 32-bit.
        #[arg(long)]
        f64: bool,
        /// Also write the per-case results as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    /// Key-value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Clip,
    Dino,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint directory, or a run directory containing `final/`.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Comma-separated: retrieval@1, retrieval@5, knn, linear_probe, slot_scores.
    #[arg(long)]
    metrics: String,
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CkptSplit {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
}

#[derive(Subcommand, Debug)]
enum SlotsCommand {
    /// Per-slot retrieval scores.
    Score {
        #[command(flatten)]
        src: CkptSplit,
        #[arg(long, default_value = "slots.json")]
        out: PathBuf,
    },
    /// Keep the top-k slots by score.
    Select {
        #[command(flatten)]
        src: CkptSplit,
        #[arg(long)]
        top_k: usize,
        #[arg(long, default_value = "slots.json")]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum MaskCommand {
    /// Fit the mask on (image, paired text, other text) triplets.
    Train {
        #[command(flatten)]
        src: CkptSplit,
        #[arg(long, value_enum, default_value = "slot")]
        granularity: GranularityArg,
        #[arg(long, default_value_t = MaskTrainConfig::default().epochs)]
        epochs: usize,
        #[arg(long, default_value = "mask.json")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GranularityArg {
    Slot,
    Dim,
}

#[derive(Subcommand, Debug)]
enum AttnCommand {
    /// Attention of the first `count` items of a split.
    Export {
        #[command(flatten)]
        src: CkptSplit,
        #[arg(long, value_enum, default_value = "text")]
        tower: TowerArg,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = AttnFilter::default().min_text_sharpness)]
        min_sharpness: f64,
        #[arg(long, default_value_t = AttnFilter::default().max_overlap)]
        max_overlap: usize,
        #[arg(long, default_value_t = AttnFilter::default().min_cross_modal_cos)]
        min_cross_cos: f64,
        #[arg(long, default_value = "attn.json")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum TowerArg {
    Image,
    Text,
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

fn load(path: &Path) -> Result<Checkpoint<f64>> {
    load_checkpoint(&resolve_checkpoint_dir(path))
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override {kv:?} is not key=value")))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| Error::Config(vec![e]))?;
    }
    if let Some(t) = a.task {
        cfg.task = match t {
            TaskArg::Clip => Task::Clip,
            TaskArg::Dino => Task::Dino,
        };
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let outcome = train(&cfg, &a.out, &mut |step, loss, r| {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        eprintln!(
            "step {step:>6}  loss {loss:.4}  retrieval@1 {}  knn {}",
            fmt(r.retrieval_at_1),
            fmt(r.knn_acc)
        );
    })?;
    println!(
        "{}",
        json!({
            "out": outcome.out_dir,
            "steps": outcome.steps,
            "final_loss": outcome.final_loss,
            "best_step": outcome.best_step,
            "best_metric": outcome.best_metric,
        })
    );
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let metrics = parse_metrics(&a.metrics)?;
    let ck = load(&a.ckpt)?;
    let report = evaluate(&ck, &a.split, &metrics)?;
    match &a.out {
        Some(p) => write_json(p, &report),
        None => {
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

/// Slot scores of a contrastive checkpoint on one split.
fn slot_scores(src: &CkptSplit) -> Result<(SlotScores, usize)> {
    let ck = load(&src.ckpt)?;
    let (enc, _) = ck.model.image_encoder();
    if ck.model.text_encoder().is_none() || enc.sparo().is_none() {
        return Err(Error::Usage("slot scoring needs a contrastive checkpoint with a sparo head".into()));
    }
    let layout = enc.layout();
    let splits = splits_for(&ck)?;
    let data = splits.get(&src.split)?;
    let (img, txt) = encode_dataset(&ck.model, data)?;
    let txt = txt.expect("contrastive checkpoint");
    let batch = ck.config.batch_size.min(data.len());
    Ok((score_slots_retrieval(&img, &txt, layout, batch, &src.split)?, layout.slots))
}

fn run_slots(cmd: SlotsCommand) -> Result<()> {
    match cmd {
        SlotsCommand::Score { src, out } => {
            let (s, _) = slot_scores(&src)?;
            write_json(
                &out,
                &json!({ "scores": s.scores, "metric": s.metric, "k": 0, "selected": Vec::<usize>::new() }),
            )
        }
        SlotsCommand::Select { src, top_k, out } => {
            let (s, l) = slot_scores(&src)?;
            if top_k == 0 || top_k > l {
                return Err(Error::Usage(format!("--top-k must lie in [1, {l}] (got {top_k})")));
            }
            let mask = select_top_k(&s, top_k)?;
            write_json(
                &out,
                &json!({ "scores": s.scores, "metric": s.metric, "k": top_k, "selected": mask.selected() }),
            )
        }
    }
}

fn run_mask(cmd: MaskCommand) -> Result<()> {
    let MaskCommand::Train {
        src,
        granularity,
        epochs,
        out,
    } = cmd;
    let ck = load(&src.ckpt)?;
    if ck.model.text_encoder().is_none() {
        return Err(Error::Usage("mask training needs a contrastive checkpoint".into()));
    }
    let layout = ck.model.image_encoder().0.layout();
    let splits = splits_for(&ck)?;
    let data = splits.get(&src.split)?;
    if data.len() < 2 {
        return Err(Error::Usage("mask training needs at least 2 items".into()));
    }
    let (img, txt) = encode_dataset(&ck.model, data)?;
    let txt = txt.expect("contrastive checkpoint");
    let mut rng = Rng::new(ck.config.seed, Stream::Eval);
    let n = img.len();
    let neg: Vec<Vec<f64>> = (0..n).map(|i| txt[(i + 1 + rng.below(n - 1)) % n].clone()).collect();
    let g = match granularity {
        GranularityArg::Slot => Granularity::Slot,
        GranularityArg::Dim => Granularity::Dim,
    };
    let cfg = MaskTrainConfig {
        epochs,
        ..MaskTrainConfig::default()
    };
    let r = train_mask(&img, &txt, &neg, layout, g, &cfg)?;
    write_json(
        &out,
        &json!({
            "granularity": r.best.granularity,
            "alpha": r.best.alpha,
            "theta": r.best.theta,
            "mask": r.best.mask(),
        }),
    )?;
    eprintln!(
        "best epoch {} accuracy {:.4}; {} epochs undone",
        r.best_epoch,
        r.best_accuracy,
        r.rejected_epochs.len()
    );
    Ok(())
}

fn run_attn(cmd: AttnCommand) -> Result<()> {
    let AttnCommand::Export {
        src,
        tower,
        count,
        min_sharpness,
        max_overlap,
        min_cross_cos,
        out,
    } = cmd;
    let ck = load(&src.ckpt)?;
    let splits = splits_for(&ck)?;
    let data = splits.get(&src.split)?;
    let idx: Vec<usize> = (0..count.min(data.len())).collect();
    let filter = AttnFilter {
        min_text_sharpness: min_sharpness,
        max_overlap,
        min_cross_modal_cos: min_cross_cos,
    };
    let (img_enc, store) = ck.model.image_encoder();
    let images = data.image_batch::<f64>(&idx);
    let report = match (ck.model.text_encoder(), tower) {
        (Some((text_enc, _)), TowerArg::Text) => {
            let texts = data.text_batch::<f64>(&idx);
            export_attention(text_enc, store, &texts, Some((img_enc, &images)), &filter)?
        }
        (Some((text_enc, _)), TowerArg::Image) => {
            let texts = data.text_batch::<f64>(&idx);
            export_attention(img_enc, store, &images, Some((text_enc, &texts)), &filter)?
        }
        (None, TowerArg::Image) => export_attention(img_enc, store, &images, None, &filter)?,
        (None, TowerArg::Text) => {
            return Err(Error::Usage("self-distillation checkpoints have no text tower".into()));
        }
    };
    write_json(&out, &report)
}

fn run_gradcheck(wide: bool, out: Option<PathBuf>) -> Result<()> {
    let results = run_suite(wide);
    for r in &results {
        let err = r.max_rel_err.map_or_else(|| "error".to_string(), |e| format!("{e:.3e}"));
        println!(
            "{:<4} {:<22} {:>10}  tol {:.0e}{}",
            if r.pass { "ok" } else { "FAIL" },
            r.name,
            err,
            r.tolerance,
            r.error.as_deref().map_or(String::new(), |e| format!("  ({e})"))
        );
    }
    if let Some(p) = out {
        write_json(&p, &results)?;
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        return Err(Error::numeric(format!("{failed} gradient case(s) exceed tolerance")));
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.cmd {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Slots { cmd } => run_slots(cmd),
        Command::Mask { cmd } => run_mask(cmd),
        Command::Attn { cmd } => run_attn(cmd),
        Command::Gradcheck { f64, out } => run_gradcheck(f64, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
