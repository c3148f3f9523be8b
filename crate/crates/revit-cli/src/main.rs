//! Single-binary workflow: train, evaluate, analyze, export attention maps.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. The
//! `REVIT_THREADS` environment variable caps internal parallelism
//! (0 = auto).

use clap::{Args, Parser, Subcommand};
use revit::analysis::{
    decomposition_report, export_attention_maps, nonlocality_report, write_alpha_csv,
    write_nonlocality_csvs, write_nonlocality_json, write_similarity_csvs, DecompositionRow,
    NonLocalityReport,
};
use revit::attention::AlphaMode;
use revit::checkpoint::{load_checkpoint, Checkpoint};
use revit::data::{
    load_cifar10, synthetic_dataset, ChannelStats, Dataset, PadAnchor, PerturbMode, PerturbSpec,
};
use revit::error::Error;
use revit::model::{model_forward, ModelConfig, Variant};
use revit::tensor::{Real, Tensor};
use revit::train::{evaluate, perturb_sweep, train, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

#[derive(Parser)]
#[command(name = "revit", version, about = "Residual-attention vision transformer workbench")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics plus the best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint's top-1 accuracy, optionally under perturbation.
    Eval(EvalArgs),
    /// Emit non-locality, similarity, or gate reports for checkpoints.
    Analyze(AnalyzeArgs),
    /// Export per-layer per-head attention maps for one image.
    ExportAttn(ExportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory, or the reserved word `synthetic`.
    #[arg(long)]
    data: Option<String>,
    /// Output directory for metrics and checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Architecture variant.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Gate mode: shared | per_layer | fixed:<v>.
    #[arg(long, value_parser = parse_alpha_mode)]
    alpha_mode: Option<AlphaMode>,
    /// Seed for initialization and data order.
    #[arg(long)]
    seed: Option<u64>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory, or the reserved word `synthetic`.
    #[arg(long)]
    data: String,
    /// Perturbation as mode:percent, with percent in {0,15,30,45,60} or
    /// `all` for the full sweep.
    #[arg(long, value_parser = parse_perturb)]
    perturb: Option<PerturbArg>,
    /// Content placement for the scale perturbation.
    #[arg(long, value_parser = parse_anchor, default_value = "top_left")]
    pad_anchor: PadAnchor,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Checkpoint to analyze; pass twice for a side-by-side comparison.
    #[arg(long, required = true, num_args = 1)]
    ckpt: Vec<PathBuf>,
    /// Dataset directory, or the reserved word `synthetic`.
    #[arg(long)]
    data: String,
    #[arg(long, value_parser = parse_metric)]
    metric: Metric,
    /// Number of images the metric is averaged over.
    #[arg(long, default_value_t = 16)]
    samples: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory or `synthetic`; required when --image is an index.
    #[arg(long)]
    data: Option<String>,
    /// Dataset index, or a path to a raw little-endian f32 `[C,H,W]` blob.
    #[arg(long)]
    image: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy)]
enum Metric {
    NonLocality,
    Similarity,
    Alpha,
}

#[derive(Clone, Copy)]
struct PerturbArg {
    mode: PerturbMode,
    /// `None` sweeps the whole grid.
    percent: Option<u32>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::from_str(s).map_err(|e| e.to_string())
}

fn parse_alpha_mode(s: &str) -> Result<AlphaMode, String> {
    AlphaMode::from_str(s).map_err(|e| e.to_string())
}

fn parse_anchor(s: &str) -> Result<PadAnchor, String> {
    PadAnchor::from_str(s).map_err(|e| e.to_string())
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    match s {
        "nonlocality" => Ok(Metric::NonLocality),
        "similarity" => Ok(Metric::Similarity),
        "alpha" => Ok(Metric::Alpha),
        _ => Err(format!("unknown metric '{s}' (expected nonlocality | similarity | alpha)")),
    }
}

fn parse_perturb(s: &str) -> Result<PerturbArg, String> {
    let (mode, pct) =
        s.split_once(':').ok_or_else(|| format!("expected mode:percent, got '{s}'"))?;
    let mode = PerturbMode::from_str(mode).map_err(|e| e.to_string())?;
    if pct == "all" {
        return Ok(PerturbArg { mode, percent: None });
    }
    let percent: u32 = pct.parse().map_err(|_| format!("bad percent '{pct}'"))?;
    // validate against the grid now so usage errors exit with code 2
    PerturbSpec::new(mode, percent).map_err(|e| e.to_string())?;
    Ok(PerturbArg { mode, percent: Some(percent) })
}

/// JSON run configuration: model + training + data selection. Unknown keys
/// are rejected.
#[derive(Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
    data: Option<String>,
    out: Option<PathBuf>,
    synthetic: Option<SyntheticSpec>,
    normalize: Option<ChannelStats>,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SyntheticSpec {
    n: usize,
    val: usize,
    classes: Option<usize>,
    seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { n: 512, val: 128, classes: None, seed: 9 }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::ExportAttn(args) => cmd_export_attn(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    match path {
        None => Ok(RunConfig::default()),
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_slice(&bytes)
                .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
        }
    }
}

fn synthetic_for(cfg: &ModelConfig, spec: &SyntheticSpec) -> Result<(Dataset, Dataset), Error> {
    let classes = spec.classes.unwrap_or(cfg.num_classes);
    if classes > cfg.num_classes {
        return Err(Error::invalid(format!(
            "synthetic classes {classes} exceed model's {} classes",
            cfg.num_classes
        )));
    }
    let train = synthetic_dataset(spec.seed, spec.n, classes, cfg.grid(), cfg.image_size)?;
    let val = synthetic_dataset(spec.seed + 1, spec.val, classes, cfg.grid(), cfg.image_size)?;
    Ok((train, val))
}

/// Dataset used by eval/analyze/export when `synthetic` is requested:
/// deterministic, 256 validation-style images.
fn synthetic_eval_set(cfg: &ModelConfig) -> Result<Dataset, Error> {
    let classes = cfg.num_classes.min(cfg.grid() * cfg.grid());
    synthetic_dataset(1234, 256, classes, cfg.grid(), cfg.image_size)
}

fn eval_dataset(data: &str, cfg: &ModelConfig) -> Result<Dataset, Error> {
    if data == "synthetic" {
        synthetic_eval_set(cfg)
    } else {
        let (_, test) = load_cifar10(Path::new(data))?;
        Ok(test)
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let mut run = load_run_config(args.config.as_deref())?;
    let mut model_cfg = run.model.take().unwrap_or_else(|| ModelConfig::toy(Variant::Revit));
    let mut train_cfg = run.train.take().unwrap_or_default();
    if let Some(v) = args.variant {
        model_cfg.variant = v;
    }
    if let Some(m) = args.alpha_mode {
        model_cfg.alpha_mode = m;
    }
    if let Some(s) = args.seed {
        model_cfg.seed = s;
        train_cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        train_cfg.epochs = e;
    }
    let data = args
        .data
        .or(run.data)
        .ok_or_else(|| Error::invalid("no dataset: pass --data or set \"data\" in the config"))?;
    let out = args
        .out
        .or(run.out)
        .ok_or_else(|| Error::invalid("no output dir: pass --out or set \"out\" in the config"))?;
    model_cfg.validate()?;
    train_cfg.validate()?;
    if let Some(stats) = &run.normalize {
        stats.validate(model_cfg.channels)?;
    }

    let (train_ds, val_ds) = if data == "synthetic" {
        synthetic_for(&model_cfg, &run.synthetic.clone().unwrap_or_default())?
    } else {
        load_cifar10(Path::new(&data))?
    };
    let outcome =
        train(&model_cfg, &train_cfg, &train_ds, &val_ds, run.normalize.as_ref(), &out)?;
    println!("checkpoint={}", outcome.checkpoint_path.display());
    println!("metrics={}", outcome.metrics_path.display());
    println!("best_val={}", outcome.best_val);
    println!(
        "alpha={}",
        outcome.final_alphas.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(",")
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let ds = eval_dataset(&args.data, &ckpt.config)?;
    match args.perturb {
        None => {
            let top1 = evaluate(&ckpt.config, &ckpt.params, &ds, None, ckpt.normalize.as_ref())?;
            println!("top1={top1}");
        }
        Some(PerturbArg { mode, percent: Some(percent) }) => {
            let spec = PerturbSpec::new(mode, percent)?.with_anchor(args.pad_anchor);
            let top1 =
                evaluate(&ckpt.config, &ckpt.params, &ds, Some(&spec), ckpt.normalize.as_ref())?;
            println!("top1={top1}");
        }
        Some(PerturbArg { mode, percent: None }) => {
            let rows =
                perturb_sweep(&ckpt.config, &ckpt.params, &ds, mode, ckpt.normalize.as_ref())?;
            println!("mode,percent,top1,drop");
            for row in rows {
                println!("{},{},{},{}", row.mode, row.percent, row.top1, row.drop);
            }
        }
    }
    Ok(())
}

struct LoadedModel {
    tag: String,
    ckpt: Checkpoint,
}

fn analysis_images(ds: &Dataset, samples: usize, stats: Option<&ChannelStats>) -> Result<Vec<Tensor>, Error> {
    if samples == 0 || samples > ds.len() {
        return Err(Error::invalid(format!(
            "samples {} out of range for dataset of {}",
            samples,
            ds.len()
        )));
    }
    (0..samples)
        .map(|i| {
            let img = ds.image(i);
            match stats {
                Some(stats) => revit::data::normalize_image(&img, stats),
                None => Ok(img),
            }
        })
        .collect()
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), Error> {
    if args.ckpt.len() > 2 {
        return Err(Error::invalid("at most two checkpoints can be compared"));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut models = Vec::new();
    for (i, path) in args.ckpt.iter().enumerate() {
        let ckpt = load_checkpoint(path)?;
        models.push(LoadedModel { tag: format!("m{i}-{}", ckpt.config.variant), ckpt });
    }
    let base = &models[0].ckpt.config;
    for m in &models[1..] {
        if m.ckpt.config.image_size != base.image_size
            || m.ckpt.config.patch_size != base.patch_size
            || m.ckpt.config.channels != base.channels
        {
            return Err(Error::invalid(
                "checkpoints disagree on image geometry; they cannot share one analysis run",
            ));
        }
    }
    let ds = eval_dataset(&args.data, base)?;

    match args.metric {
        Metric::NonLocality => {
            let mut reports: Vec<NonLocalityReport> = Vec::new();
            let mut decomposition: Vec<(String, Vec<DecompositionRow>)> = Vec::new();
            for m in &models {
                let images =
                    analysis_images(&ds, args.samples, m.ckpt.normalize.as_ref())?;
                reports.push(nonlocality_report(
                    &m.ckpt.config,
                    &m.ckpt.params,
                    &images,
                    &m.tag,
                )?);
                let rows = decomposition_report(&m.ckpt.config, &m.ckpt.params, &images)?;
                if !rows.is_empty() {
                    decomposition.push((m.tag.clone(), rows));
                }
            }
            let (head_csv, layer_csv) = write_nonlocality_csvs(&reports, &args.out)?;
            let json = write_nonlocality_json(&reports, &decomposition, base.grid(), &args.out)?;
            println!("wrote {}", head_csv.display());
            println!("wrote {}", layer_csv.display());
            println!("wrote {}", json.display());
        }
        Metric::Similarity => {
            for m in &models {
                let images =
                    analysis_images(&ds, args.samples, m.ckpt.normalize.as_ref())?;
                let paths = write_similarity_csvs(
                    &m.ckpt.config,
                    &m.ckpt.params,
                    &images,
                    &m.tag,
                    &args.out,
                )?;
                println!("wrote {} similarity matrices for {}", paths.len(), m.tag);
            }
        }
        Metric::Alpha => {
            for m in &models {
                let path = args.out.join(format!("alpha_{}.csv", m.tag));
                let wrote = write_alpha_csv(&m.ckpt.config, &m.ckpt.params, &path)?;
                if wrote {
                    println!("wrote {}", path.display());
                } else {
                    println!(
                        "notice: {} is a plain checkpoint with no gate; wrote empty report {}",
                        m.tag,
                        path.display()
                    );
                }
            }
        }
    }
    Ok(())
}

fn cmd_export_attn(args: ExportArgs) -> Result<(), Error> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let cfg = &ckpt.config;
    let image: Tensor = if let Ok(index) = args.image.parse::<usize>() {
        let data = args.data.as_deref().ok_or_else(|| {
            Error::invalid("--image takes a dataset index only when --data is given")
        })?;
        let ds = eval_dataset(data, cfg)?;
        if index >= ds.len() {
            return Err(Error::invalid(format!(
                "image index {index} out of range for dataset of {}",
                ds.len()
            )));
        }
        ds.image(index)
    } else {
        let path = Path::new(&args.image);
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let numel = cfg.channels * cfg.image_size * cfg.image_size;
        if bytes.len() != numel * 4 {
            return Err(Error::format(format!(
                "{}: expected {} bytes of f32 for [{}x{}x{}], found {}",
                path.display(),
                numel * 4,
                cfg.channels,
                cfg.image_size,
                cfg.image_size,
                bytes.len()
            )));
        }
        let data: Vec<Real> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Real)
            .collect();
        Tensor::new(vec![cfg.channels, cfg.image_size, cfg.image_size], data)?
    };
    let image = match &ckpt.normalize {
        Some(stats) => revit::data::normalize_image(&image, stats)?,
        None => image,
    };
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let record = model_forward(&image, cfg, &ckpt.params, true)?;
    let index = export_attention_maps(&record.attn, &args.out)?;
    println!(
        "wrote {} maps ({} layers x {} heads, {} tokens) to {}",
        index.csv_files.len(),
        index.layers,
        index.heads,
        index.tokens,
        args.out.display()
    );
    Ok(())
}
