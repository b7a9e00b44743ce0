use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

use wrid::checkpoint;
use wrid::experiments::{ablation_grid, ablation_table, orderings, run_ablation, Variant};
use wrid::gradcheck::{model_check, op_suite, GRAD_TOL, MODEL_FD_STEP};
use wrid::image::{read_image, write_pgm};
use wrid::infer::{aggregate_tensor, heatmap, identify, word_scores, EvalReport, HeatmapOptions};
use wrid::synth::{gen_identification_dataset, DataSource, Split};
use wrid::train::{jsonl, pretrain_wi, train};
use wrid::{
    AttentionPlacement, FreezeMask, Fusion, Model, ModelConfig, ParamStore, RunConfig, StreamMode,
    TrainConfig,
};

/// Clap parser for the enums that implement `FromStr` with a listing of
/// valid names in their error.
fn parse_named<T: FromStr<Err = wrid::Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: wrid::Error| e.to_string())
}

#[derive(Parser)]
#[command(
    name = "wrid",
    version,
    about = "Writer identification from word-image fragments"
)]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic writer corpus to disk in the ingestion layout.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        writers: usize,
        #[arg(long, default_value_t = 60)]
        words: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrain the writer-independent stream with the triplet loss.
    Pretrain(PretrainArgs),
    /// Train a writer classifier.
    Train(TrainArgs),
    /// Top-1/Top-5 evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// `synth:WRITERS,WORDS,SEED` or a dataset directory.
        #[arg(long)]
        data: DataSource,
        /// JSON report path; a text table is written next to it.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Seed of the validation draw for directory datasets.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score one word image and print the writer distribution.
    Identify {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        word: PathBuf,
    },
    /// Activation heatmap of one word image.
    Heatmap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        word: PathBuf,
        /// Output PGM.
        #[arg(long)]
        out: PathBuf,
        /// Gaussian smoothing in pixels (default: fragment side / 20).
        #[arg(long)]
        sigma: Option<f32>,
        /// Color overlay PNG (needs the `png` feature).
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Finite-difference check of every tape operation and of a micro model.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        scale: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Coordinates differenced per model tensor.
        #[arg(long, default_value_t = 4)]
        coords: usize,
    },
    /// Train and test the fusion/attention grid.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(clap::Args)]
struct PretrainArgs {
    /// `synth:CLASSES,SAMPLES,SEED` or a directory of class folders.
    #[arg(long)]
    glyphs: DataSource,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 512)]
    embed_dim: usize,
    #[arg(long, default_value_t = 1)]
    scale: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.2)]
    margin: f64,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    /// Skip the held-out triplet loss.
    #[arg(long)]
    no_val: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Keep {
    /// Weights of the epoch with the best validation Top-1.
    Best,
    Last,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// `synth:WRITERS,WORDS,SEED` or a dataset directory.
    #[arg(long)]
    data: Option<DataSource>,
    /// Start from a run configuration; flags given explicitly override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// wd, wi or dual.
    #[arg(long, value_parser = parse_named::<StreamMode>)]
    mode: Option<StreamMode>,
    /// max, add or concat.
    #[arg(long, value_parser = parse_named::<Fusion>)]
    fusion: Option<Fusion>,
    /// none, per-stream or post-fusion.
    #[arg(long, value_parser = parse_named::<AttentionPlacement>)]
    attention: Option<AttentionPlacement>,
    /// Pretrained writer-independent checkpoint.
    #[arg(long)]
    wi_ckpt: Option<PathBuf>,
    /// Tensors copied from `--wi-ckpt`.
    #[arg(long, default_value = "wi")]
    load_prefix: String,
    /// Comma-separated prefixes to freeze, or `none` (default: the
    /// standard mask when starting from `--wi-ckpt`).
    #[arg(long)]
    freeze: Option<String>,
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long, value_enum, default_value_t = Keep::Best)]
    keep: Keep,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridPreset {
    /// Every coherent cell.
    Full,
    /// Dual stream, post-fusion attention, each fusion.
    Fusion,
    /// Dual stream, concat fusion, each attention placement.
    Attention,
}

#[derive(clap::Args)]
struct AblateArgs {
    #[arg(long)]
    data: DataSource,
    /// Pretrained writer-independent checkpoint for the dual cells.
    #[arg(long)]
    wi_ckpt: PathBuf,
    #[arg(long, value_enum, default_value_t = GridPreset::Full)]
    grid: GridPreset,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 150)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(out_dir: &Path, writers: usize, words: usize, seed: u64) -> Result<()> {
    let ds = gen_identification_dataset(writers, words, seed)?;
    ds.export(out_dir)?;
    println!(
        "wrote {} words by {} writers to {}",
        ds.items.len(),
        writers,
        out_dir.display()
    );
    Ok(())
}

fn cmd_pretrain(a: &PretrainArgs) -> Result<()> {
    let glyphs = a.glyphs.glyphs()?;
    let model_cfg = ModelConfig::embedder(a.scale, a.embed_dim);
    let train_cfg = TrainConfig {
        batch_size: a.batch_size,
        epochs: a.epochs,
        seed: a.seed,
        learning_rate: a.lr,
        triplet_margin: a.margin,
        patience: a.patience,
        ..TrainConfig::pretrain()
    };
    let mut model = Model::new(model_cfg.clone(), a.seed)?;
    ensure_parent(&a.out)?;
    let history = pretrain_wi(&mut model, &glyphs, &train_cfg, !a.no_val, |_| {
        ControlFlow::Continue(())
    })?;
    checkpoint::save(&model, &a.out)?;
    write_lines(
        &sibling(&a.out, "metrics.jsonl"),
        &history.iter().map(jsonl).collect::<Vec<_>>(),
    )?;
    let echo = RunConfig {
        seed: a.seed,
        data: a.glyphs.clone(),
        out_dir: a.out.parent().map(Path::to_path_buf).unwrap_or_default(),
        model: model_cfg,
        train: train_cfg,
    };
    echo.save(&sibling(&a.out, "config.toml"))?;
    println!("saved {}", a.out.display());
    Ok(())
}

/// Merges `--config` with explicitly given flags.
fn train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig {
            seed: 0,
            data: a
                .data
                .clone()
                .context("--data is required without --config")?,
            out_dir: PathBuf::new(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        },
    };
    if let Some(d) = &a.data {
        cfg.data = d.clone();
    }
    if let Some(v) = a.mode {
        cfg.model.mode = v;
    }
    if let Some(v) = a.fusion {
        cfg.model.fusion = v;
    }
    if let Some(v) = a.attention {
        cfg.model.attention_placement = v;
    }
    if let Some(v) = a.scale {
        cfg.model.channel_scale = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
        cfg.train.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = a.label_smoothing {
        cfg.train.label_smoothing = v;
    }
    if let Some(v) = a.patience {
        cfg.train.patience = v;
    }
    cfg.out_dir = a.out.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(cfg)
}

fn freeze_mask(spec: Option<&str>, mode: StreamMode, pretrained: bool) -> FreezeMask {
    match spec {
        Some("none") => FreezeMask { prefixes: vec![] },
        Some(list) => FreezeMask {
            prefixes: list
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect(),
        },
        None if pretrained => FreezeMask::default_for(mode),
        None => FreezeMask { prefixes: vec![] },
    }
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = train_config(a)?;
    if cfg.model.mode == StreamMode::Dual && a.wi_ckpt.is_none() {
        Cli::command()
            .error(
                clap::error::ErrorKind::MissingRequiredArgument,
                "dual mode needs --wi-ckpt: the writer-independent stream starts from pretrained \
                 weights and keeps wi.stem, wi.res1 and wi.res2 frozen during training",
            )
            .exit();
    }
    let dataset = cfg.data.writers(cfg.seed)?;
    cfg.model.num_writers = dataset.num_writers;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    if let Some(path) = &a.wi_ckpt {
        let source = checkpoint::load(path)?;
        if source.config.fragment_side != cfg.model.fragment_side {
            bail!(
                "{} was trained on {}-pixel fragments, this model uses {}",
                path.display(),
                source.config.fragment_side,
                cfg.model.fragment_side
            );
        }
        let n = model
            .load_prefix(&source.store, &a.load_prefix)
            .with_context(|| format!("loading `{}` from {}", a.load_prefix, path.display()))?;
        log::info!(
            "copied {n} tensors under `{}` from {}",
            a.load_prefix,
            path.display()
        );
    }
    model.apply_freeze(&freeze_mask(
        a.freeze.as_deref(),
        cfg.model.mode,
        a.wi_ckpt.is_some(),
    ))?;
    for s in [Split::Train, Split::Val, Split::Test] {
        log::info!("{s}: {} words", dataset.split(s).count());
    }

    ensure_parent(&a.out)?;
    let mut best: Option<(f64, ParamStore)> = None;
    let history = train(&mut model, &dataset, &cfg.train, |m, model| {
        if let (Keep::Best, Some(top1)) = (a.keep, m.val_top1) {
            if best.as_ref().is_none_or(|(b, _)| top1 > *b) {
                best = Some((top1, model.store.clone()));
            }
        }
        ControlFlow::Continue(())
    })?;
    if let Some((top1, store)) = best {
        log::info!("keeping the epoch with validation Top-1 {top1:.2}");
        model.store = store;
    }
    checkpoint::save(&model, &a.out)?;
    write_lines(
        &sibling(&a.out, "metrics.jsonl"),
        &history.iter().map(jsonl).collect::<Vec<_>>(),
    )?;
    cfg.save(&sibling(&a.out, "config.toml"))?;
    println!("saved {}", a.out.display());
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: &DataSource, report: &Path, split: Split, seed: u64) -> Result<()> {
    let model = checkpoint::load(ckpt)?;
    let dataset = data.writers(seed)?;
    if dataset.num_writers != model.config.num_writers {
        bail!(
            "checkpoint scores {} writers but the dataset has {}",
            model.config.num_writers,
            dataset.num_writers
        );
    }
    let r = wrid::evaluate(&model, dataset.split(split))?;
    let table = EvalReport::table(&[(format!("{} ({split})", model_label(&model.config)), &r)]);
    ensure_parent(report)?;
    fs::write(report, r.to_json()).with_context(|| format!("writing {}", report.display()))?;
    fs::write(report.with_extension("txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn model_label(c: &ModelConfig) -> String {
    match c.mode {
        StreamMode::Dual => format!("{} {} {}", c.mode, c.fusion, c.attention_placement),
        _ => format!("{} {}", c.mode, c.attention_placement),
    }
}

fn cmd_identify(ckpt: &Path, word: &Path) -> Result<()> {
    let model = checkpoint::load(ckpt)?;
    let img = read_image(word)?;
    let scores = word_scores(&model, &img)?;
    let p = aggregate_tensor(&scores)?;
    println!("fragments: {}", scores.shape()[0]);
    println!("writer  probability");
    for (i, v) in p.iter().enumerate() {
        println!("{i:>6}  {v:.9}");
    }
    println!("predicted: {}", identify(&p));
    Ok(())
}

fn cmd_heatmap(
    ckpt: &Path,
    word: &Path,
    out: &Path,
    sigma: Option<f32>,
    overlay: Option<&Path>,
) -> Result<()> {
    let model = checkpoint::load(ckpt)?;
    let img = read_image(word)?;
    let heat = heatmap(&model, &img, HeatmapOptions { sigma })?;
    ensure_parent(out)?;
    write_pgm(out, &heat)?;
    if let Some(path) = overlay {
        write_overlay(path, &img, &heat)?;
    }
    println!(
        "wrote {}x{} heatmap to {}",
        heat.width(),
        heat.height(),
        out.display()
    );
    Ok(())
}

#[cfg(feature = "png")]
fn write_overlay(path: &Path, word: &wrid::GrayImage, heat: &wrid::GrayImage) -> Result<()> {
    let rgb = wrid::infer::overlay_rgb(word, heat)?;
    let bytes = wrid::image::png_io::encode_rgb(word.width(), word.height(), &rgb)?;
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

#[cfg(not(feature = "png"))]
fn write_overlay(_: &Path, _: &wrid::GrayImage, _: &wrid::GrayImage) -> Result<()> {
    bail!("--overlay needs PNG support (build with --features png)")
}

fn cmd_gradcheck(scale: usize, seed: u64, seeds: u64, coords: usize) -> Result<bool> {
    let mut ok = true;
    for s in seed..seed + seeds {
        for (op, r) in op_suite(s)? {
            let pass = r.passes(GRAD_TOL);
            ok &= pass;
            println!(
                "{} seed {s:<3} {op:<26} {:.3e}",
                if pass { "ok  " } else { "FAIL" },
                r.max_rel_error
            );
        }
        let r = model_check(scale, s, coords, MODEL_FD_STEP)?;
        let pass = r.passes(GRAD_TOL);
        ok &= pass;
        println!(
            "{} seed {s:<3} {:<26} {:.3e} over {} coordinates",
            if pass { "ok  " } else { "FAIL" },
            format!("model (scale {scale})"),
            r.max_rel_error,
            r.coords_checked
        );
    }
    println!(
        "{}",
        if ok {
            "all gradients agree"
        } else {
            "gradient check failed"
        }
    );
    Ok(ok)
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let source = checkpoint::load(&a.wi_ckpt)?;
    let dataset = a.data.writers(a.seed)?;
    let base = ModelConfig {
        num_writers: dataset.num_writers,
        channel_scale: source.config.channel_scale,
        fragment_side: source.config.fragment_side,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        epochs: a.epochs,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let keep = |v: &Variant| match a.grid {
        GridPreset::Full => true,
        GridPreset::Fusion => {
            v.mode == StreamMode::Dual && v.attention == AttentionPlacement::PostFusion
        }
        GridPreset::Attention => v.mode == StreamMode::Dual && v.fusion == Some(Fusion::Concat),
    };
    let variants: Vec<Variant> = ablation_grid().into_iter().filter(keep).collect();
    log::info!("{} cells", variants.len());
    let rows = run_ablation(
        &base,
        &train_cfg,
        a.seed,
        &dataset,
        &source.store,
        &variants,
        |v, m| {
            log::debug!("{} epoch {}", v.label(), m.epoch);
        },
    )?;
    fs::create_dir_all(&a.out_dir)?;
    let table = ablation_table(&rows);
    let ord = orderings(&rows);
    let mut text = table.clone();
    text.push('\n');
    for o in &ord {
        text.push_str(&format!("{:<22} {:<5} ({})\n", o.claim, o.holds, o.detail));
    }
    fs::write(a.out_dir.join("ablation.txt"), &text)?;
    fs::write(
        a.out_dir.join("ablation.json"),
        serde_json::to_string_pretty(&serde_json::json!({ "rows": rows, "orderings": ord }))?,
    )?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth {
            out_dir,
            writers,
            words,
            seed,
        } => cmd_synth(&out_dir, writers, words, seed)?,
        Command::Pretrain(a) => cmd_pretrain(&a)?,
        Command::Train(a) => cmd_train(&a)?,
        Command::Eval {
            ckpt,
            data,
            report,
            split,
            seed,
        } => cmd_eval(&ckpt, &data, &report, split.into(), seed)?,
        Command::Identify { ckpt, word } => cmd_identify(&ckpt, &word)?,
        Command::Heatmap {
            ckpt,
            word,
            out,
            sigma,
            overlay,
        } => cmd_heatmap(&ckpt, &word, &out, sigma, overlay.as_deref())?,
        Command::Gradcheck {
            scale,
            seed,
            seeds,
            coords,
        } => return cmd_gradcheck(scale, seed, seeds, coords),
        Command::Ablate(a) => cmd_ablate(&a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
