use std::fs;
use std::io::{IsTerminal as _, Write as _};
use std::net::SocketAddr;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cams_core::features::BackboneSpec;
use cams_core::imaging::{encode_png, load_image, save_image};
use cams_core::palette::{extract_palette, hex, PaletteSource};
use cams_core::transfer::{
    run_classic_nst, run_transfer, sidecar, AssociationMap, TransferConfig, TransferMode, TransferState,
};
use cams_core::{evaluate_triple, CamsError, FeatureExtractor, Image, LossWeights};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "cams", version, about = "Color-aware multi-style transfer")]
struct Cli {
    /// Log verbosity on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stylize a content image with a style image.
    Transfer(TransferArgs),
    /// Print the dominant colors of an image.
    Palette(PaletteArgs),
    /// Report content, style and color-aware losses for output/content/style triples.
    Evaluate(EvaluateArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum BackboneKind {
    /// Pretrained VGG-19 from --weights or CAMS_WEIGHTS.
    Vgg19,
    /// VGG-19 layout with seeded random weights and reduced widths.
    Random,
    /// Two-convolution test double.
    Tiny,
}

#[derive(Args, Clone)]
struct BackboneArgs {
    /// VGG-19 safetensors checkpoint.
    #[arg(long, env = "CAMS_WEIGHTS")]
    weights: Option<PathBuf>,
    /// Backbone to use. Defaults to vgg19 when weights are available, random otherwise.
    #[arg(long, value_enum)]
    backbone: Option<BackboneKind>,
    /// Channel-width divisor for the random backbone.
    #[arg(long, default_value_t = 2)]
    width_divisor: usize,
}

impl BackboneArgs {
    fn spec(&self, seed: u64) -> Result<BackboneSpec, CliError> {
        let kind = self.backbone.unwrap_or_else(|| {
            if self.weights.is_some() {
                return BackboneKind::Vgg19;
            }
            tracing::warn!("no VGG-19 weights given; using a random VGG backbone (see --weights)");
            BackboneKind::Random
        });
        Ok(match kind {
            BackboneKind::Vgg19 => BackboneSpec::Vgg19 {
                weights: self
                    .weights
                    .clone()
                    .ok_or_else(|| CliError::Usage("--backbone vgg19 requires --weights or CAMS_WEIGHTS".into()))?,
            },
            BackboneKind::Random => {
                if self.width_divisor == 0 {
                    return Err(CliError::Usage("--width-divisor must be >= 1".into()));
                }
                BackboneSpec::RandomVgg {
                    seed,
                    width_divisor: self.width_divisor,
                }
            }
            BackboneKind::Tiny => BackboneSpec::Tiny { seed },
        })
    }
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    content: PathBuf,
    #[arg(long)]
    style: PathBuf,
    /// Output PNG path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Auto)]
    mode: ModeArg,
    /// Association JSON: {"pairs": [[content_idx, style_idx], ...], "discard_content": [..], "discard_style": [..]}
    #[arg(long, required_if_eq("mode", "manual"))]
    assoc: Option<PathBuf>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Colors extracted per image.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_side: Option<usize>,
    #[arg(long)]
    snapshot_every: Option<usize>,
    /// Disable the Gaussian smoothing of masks.
    #[arg(long)]
    no_smooth: bool,
    /// Treat generated-image masks as constants within each iteration.
    #[arg(long)]
    detach_masks: bool,
    /// Run classic Gram-matrix style transfer instead.
    #[arg(long)]
    baseline: bool,
    /// Directory for intermediate snapshots and mask PNGs.
    #[arg(long)]
    snapshots: Option<PathBuf>,
    #[command(flatten)]
    backbone: BackboneArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Auto,
    Manual,
}

#[derive(Args)]
struct PaletteArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Write the palette as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Write a swatch strip PNG.
    #[arg(long)]
    swatch: Option<PathBuf>,
    #[arg(long)]
    max_side: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, required_unless_present = "triples", conflicts_with = "triples")]
    output: Option<PathBuf>,
    #[arg(long, required_unless_present = "triples")]
    content: Option<PathBuf>,
    #[arg(long, required_unless_present = "triples")]
    style: Option<PathBuf>,
    /// Directory of triples: each subdirectory holds output, content and style images.
    #[arg(long)]
    triples: Option<PathBuf>,
    /// Append results as CSV rows.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_side: Option<usize>,
    #[command(flatten)]
    backbone: BackboneArgs,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Jobs allowed to run at once.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Write finished job artifacts here.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Serve a built UI bundle from this directory.
    #[arg(long)]
    static_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    backbone: BackboneArgs,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<CamsError> for CliError {
    fn from(e: CamsError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .with_max_level(level)
        .init();
    let result = match cli.command {
        Command::Transfer(a) => cmd_transfer(a),
        Command::Palette(a) => cmd_palette(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Serve(a) => cmd_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn resolve_config(a: &TransferArgs) -> Result<TransferConfig, CliError> {
    let d = TransferConfig::default();
    let associations = match &a.assoc {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            Some(AssociationMap::from_json(&text)?)
        }
        None => None,
    };
    let cfg = TransferConfig {
        sigma: a.sigma.unwrap_or(d.sigma),
        palette_k: a.k.unwrap_or(d.palette_k),
        tau_merge: a.tau.unwrap_or(d.tau_merge),
        smooth_masks: !a.no_smooth,
        weights: LossWeights {
            alpha: a.alpha.unwrap_or(d.weights.alpha),
            beta: a.beta.unwrap_or(d.weights.beta),
            style_layer_weights: None,
        },
        iterations: a.iters.unwrap_or(d.iterations),
        learning_rate: a.lr.unwrap_or(d.learning_rate),
        mode: match a.mode {
            ModeArg::Auto => TransferMode::Auto,
            ModeArg::Manual => TransferMode::Manual,
        },
        associations,
        seed: a.seed.unwrap_or(d.seed),
        snapshot_every: a.snapshot_every.unwrap_or(d.snapshot_every),
        max_side: a.max_side.unwrap_or(d.max_side),
        detach_masks: a.detach_masks,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

#[derive(Serialize)]
struct RunMetadata<'a> {
    tool: &'static str,
    version: &'static str,
    content: &'a Path,
    style: &'a Path,
    out: &'a Path,
    baseline: bool,
    backbone: &'a BackboneSpec,
    backbone_checksum: String,
    config: &'a TransferConfig,
    content_size: [usize; 2],
    style_size: [usize; 2],
    iterations_run: usize,
    termination: cams_core::transfer::Termination,
    initial_total: f64,
    final_total: f64,
    wall_time_s: f64,
}

fn cmd_transfer(a: TransferArgs) -> Result<(), CliError> {
    let cfg = resolve_config(&a)?;
    let spec = a.backbone.spec(cfg.seed)?;
    let content = load_image(&a.content, Some(cfg.max_side))?;
    let style = load_image(&a.style, Some(cfg.max_side))?;
    let extractor = spec.build()?;
    if let Some(dir) = &a.snapshots {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let snapshot_dir = a.snapshots.clone();
    let mut snapshot_error = None;
    let mut on_progress = |st: &TransferState<'_>| {
        tracing::info!(iter = st.iter, total = st.losses.total, "progress");
        if let (Some(dir), true) = (&snapshot_dir, st.is_snapshot) {
            if let Err(e) = save_image(st.generated, dir.join(format!("iter_{:05}.png", st.iter))) {
                snapshot_error = Some(e);
                return ControlFlow::Break(());
            }
        }
        ControlFlow::Continue(())
    };
    let run = if a.baseline {
        run_classic_nst(&content, &style, &extractor, &cfg, Some(&mut on_progress))
    } else {
        run_transfer(&content, &style, &extractor, &cfg, Some(&mut on_progress))
    };
    if let Some(e) = snapshot_error {
        return Err(e.into());
    }
    let result = run?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    result.export(&a.out, a.snapshots.as_deref())?;
    let meta = RunMetadata {
        tool: "cams",
        version: env!("CARGO_PKG_VERSION"),
        content: &a.content,
        style: &a.style,
        out: &a.out,
        baseline: a.baseline,
        backbone: &spec,
        backbone_checksum: format!("{:016x}", extractor.parameter_checksum()),
        config: &cfg,
        content_size: [content.height(), content.width()],
        style_size: [style.height(), style.width()],
        iterations_run: result.iterations_run,
        termination: result.termination,
        initial_total: result.initial_total(),
        final_total: result.final_total(),
        wall_time_s: result.wall_time_s,
    };
    let run_json = run_json_path(&a.out);
    let text = serde_json::to_string_pretty(&meta).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(&run_json, text).map_err(io_err(&run_json))?;
    let last = result.loss_history.last().expect("history has the initial point");
    println!("wrote {}", a.out.display());
    println!("losses: {}", sidecar(&a.out, "losses.jsonl").display());
    println!("metadata: {}", run_json.display());
    println!(
        "iterations: {}  content: {:.6e}  {}: {:.6e}  total: {:.6e}",
        result.iterations_run,
        last.content,
        if a.baseline { "style" } else { "cams" },
        last.style_term(),
        last.total
    );
    Ok(())
}

fn run_json_path(out: &Path) -> PathBuf {
    out.parent().unwrap_or(Path::new("")).join("run.json")
}

#[derive(Serialize)]
struct PaletteFile {
    colors: Vec<[f64; 3]>,
    tags: Vec<PaletteSource>,
    hex: Vec<String>,
    populations: Vec<f64>,
    degenerate: bool,
}

fn cmd_palette(a: PaletteArgs) -> Result<(), CliError> {
    if a.k == 0 {
        return Err(CliError::Usage("--k must be >= 1".into()));
    }
    let img = load_image(&a.image, a.max_side)?;
    let p = extract_palette(&img, a.k)?;
    if p.degenerate {
        eprintln!(
            "warning: image has only {} distinct colors; requested {}",
            p.colors.len(),
            a.k
        );
    }
    for (c, pop) in p.colors.iter().zip(&p.populations) {
        println!("{}  {:.4}", hex(c), pop);
    }
    if let Some(path) = &a.json {
        let file = PaletteFile {
            colors: p.colors.clone(),
            tags: vec![PaletteSource::Content; p.colors.len()],
            hex: p.colors.iter().map(hex).collect(),
            populations: p.populations.clone(),
            degenerate: p.degenerate,
        };
        let text = serde_json::to_string_pretty(&file).map_err(|e| CliError::Runtime(e.to_string()))?;
        fs::write(path, text).map_err(io_err(path))?;
    }
    if let Some(path) = &a.swatch {
        const CELL: usize = 48;
        let colors = p.colors.clone();
        let strip = Image::from_fn(CELL, CELL * colors.len(), |_, x| colors[x / CELL])?;
        fs::write(path, encode_png(&strip)).map_err(io_err(path))?;
    }
    Ok(())
}

fn eval_config(a: &EvaluateArgs) -> Result<TransferConfig, CliError> {
    let d = TransferConfig::default();
    let cfg = TransferConfig {
        sigma: a.sigma.unwrap_or(d.sigma),
        palette_k: a.k.unwrap_or(d.palette_k),
        seed: a.seed.unwrap_or(d.seed),
        max_side: a.max_side.unwrap_or(d.max_side),
        ..d
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn find_image(dir: &Path, stem: &str) -> Result<PathBuf, CliError> {
    ["png", "jpg", "jpeg"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.exists())
        .ok_or_else(|| CliError::Runtime(format!("{}: no {stem}.png or {stem}.jpg", dir.display())))
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let cfg = eval_config(&a)?;
    let spec = a.backbone.spec(cfg.seed)?;
    let mut triples: Vec<(String, PathBuf, PathBuf, PathBuf)> = Vec::new();
    match &a.triples {
        Some(dir) => {
            let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(io_err(dir))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            subdirs.sort();
            for sub in subdirs {
                let name = sub
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                triples.push((
                    name,
                    find_image(&sub, "output")?,
                    find_image(&sub, "content")?,
                    find_image(&sub, "style")?,
                ));
            }
        }
        None => triples.push((
            "triple".into(),
            a.output.clone().expect("required by clap"),
            a.content.clone().expect("required by clap"),
            a.style.clone().expect("required by clap"),
        )),
    }
    let extractor: FeatureExtractor = spec.build()?;
    let mut rows = Vec::new();
    for (name, out, content, style) in &triples {
        let load = |p: &Path| load_image(p, Some(cfg.max_side));
        let report = evaluate_triple(&load(out)?, &load(content)?, &load(style)?, &extractor, &cfg)?;
        rows.push((name.clone(), report));
    }

    if a.triples.is_none() {
        let (_, r) = &rows[0];
        println!("color_aware: {:.6e}", r.color_aware);
        println!("style: {:.6e}", r.style);
        println!("content: {:.6e}", r.content);
    }
    let write_rows = |w: &mut dyn std::io::Write, header: bool| -> Result<(), CliError> {
        let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        let err = |e: csv::Error| CliError::Runtime(e.to_string());
        if header {
            csv.write_record(["name", "color_aware", "style", "content", "wall_time_s"])
                .map_err(err)?;
        }
        for (name, r) in &rows {
            csv.write_record([
                name.clone(),
                r.color_aware.to_string(),
                r.style.to_string(),
                r.content.to_string(),
                r.wall_time_s.to_string(),
            ])
            .map_err(err)?;
        }
        csv.flush().map_err(|e| CliError::Runtime(e.to_string()))
    };
    match &a.csv {
        Some(path) => {
            let exists = path.exists() && fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(io_err(path))?;
            write_rows(&mut f, !exists)?;
            f.flush().map_err(io_err(path))?;
        }
        None if a.triples.is_some() => write_rows(&mut std::io::stdout(), true)?,
        None => {}
    }
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<(), CliError> {
    let extractor = a.backbone.spec(a.seed)?.build()?;
    let mut cfg = cams_service::ServiceConfig::new(extractor);
    cfg.workers = a.workers.max(1);
    cfg.data_dir = a.data_dir;
    cfg.static_dir = a.static_dir;
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    rt.block_on(cams_service::serve(a.addr, cfg))
        .map_err(|e| CliError::Runtime(format!("server on {}: {e}", a.addr)))
}
