use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use latseg_core::config::ExperimentConfig;
use latseg_core::data::{
    dataset_digest, export_directory, image_dimensions, load_image, load_mask, mask_to_gray, png_files,
};
use latseg_core::harness::{describe_plan, load_samples, run_harness};
use latseg_core::inference::{InferenceBundle, StabilityResult};
use latseg_core::metrics::{dice_iou, mean_metrics, SegmentationMetrics};
use latseg_core::report::{ExperimentReport, HarnessKind, Table, CONFIG_FILE};
use latseg_core::{Error, Result};

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "latseg",
    version,
    about = "Single-step latent diffusion segmentation: training, inference and experiment harnesses"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration (flat `key = value` file). Defaults apply to omitted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base training seed (`seed` key); harnesses offset it per replicate.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.max_steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Validate the configuration and print the plan without running it.
    #[arg(long, global = true)]
    dry_run: bool,
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset as images/ + masks/ PNGs.
    SynthData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model and evaluate it on the test split.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Segment an image file or directory with a trained bundle.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Inference bundle written by a training run.
        #[arg(long)]
        bundle: PathBuf,
        /// PNG file, directory of PNGs, or a directory with images/ (and optionally masks/).
        #[arg(long)]
        input: PathBuf,
        /// Ground-truth masks with the same file names; enables per-image Dice.
        #[arg(long)]
        masks: Option<PathBuf>,
    },
    /// Evaluate a bundle on the configured test split under every inference seed.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Parameterization × feature-alignment grid (6 runs).
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Alignment-weight sweep over `sweep.lambdas` × training seeds.
    SweepLambda {
        #[command(flatten)]
        common: Common,
        /// Training seeds per λ (`sweep.seeds`).
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// β-schedule sweep over the five reference schedules.
    SweepSchedule {
        #[command(flatten)]
        common: Common,
    },
    /// ε vs x0 spread of Dice across inference seeds.
    Stability {
        #[command(flatten)]
        common: Common,
        /// Inference seeds (`eval.seeds`).
        #[arg(long)]
        seeds: Option<usize>,
        /// Training replicates per parameterization (`stability.replicates`).
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Re-render a run directory's report.json into Markdown, CSV and PNG plots.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directory containing report.json.
        #[arg(long)]
        dir: PathBuf,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::SynthData { common }
            | Command::Train { common }
            | Command::Infer { common, .. }
            | Command::Eval { common, .. }
            | Command::Ablate { common }
            | Command::SweepLambda { common, .. }
            | Command::SweepSchedule { common }
            | Command::Stability { common, .. }
            | Command::Report { common, .. } => common,
        }
    }

    fn harness(&self) -> Option<HarnessKind> {
        Some(match self {
            Command::Train { .. } => HarnessKind::Train,
            Command::Ablate { .. } => HarnessKind::Ablation,
            Command::SweepLambda { .. } => HarnessKind::LambdaSweep,
            Command::SweepSchedule { .. } => HarnessKind::ScheduleSweep,
            Command::Stability { .. } => HarnessKind::Stability,
            _ => return None,
        })
    }
}

/// Errors tagged with the phase they came from, for the exit status.
enum Failure {
    Config(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

fn resolve_config(cmd: &Command) -> std::result::Result<ExperimentConfig, Failure> {
    let c = cmd.common();
    let text = match &c.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Failure::Config(Error::io(p, e)))?,
        None => String::new(),
    };
    let mut overrides = c.overrides.clone();
    if let Some(s) = c.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = &c.out {
        overrides.push(format!("output_dir={}", toml_string(&o.display().to_string())));
    }
    match cmd {
        Command::SweepLambda { seeds: Some(n), .. } => overrides.push(format!("sweep.seeds={n}")),
        Command::Stability { seeds, replicates, .. } => {
            if let Some(n) = seeds {
                overrides.push(format!("eval.seeds={n}"));
            }
            if let Some(n) = replicates {
                overrides.push(format!("stability.replicates={n}"));
            }
        }
        _ => {}
    }
    ExperimentConfig::parse_with_overrides(&text, &overrides).map_err(Failure::Config)
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), value)?;
    Ok(())
}

fn write_resolved(cfg: &ExperimentConfig) -> Result<()> {
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join(CONFIG_FILE);
    std::fs::write(&p, cfg.to_resolved_string()).map_err(|e| Error::io(&p, e))
}

#[derive(Serialize)]
struct DatasetManifest {
    digest: String,
    resolution: usize,
    seed: u64,
    train: Vec<String>,
    test: Vec<String>,
}

fn synth_data(cfg: &ExperimentConfig) -> Result<()> {
    let (train, test) = load_samples(cfg)?;
    let all: Vec<_> = train.iter().chain(&test).cloned().collect();
    let root = cfg.output_dir.join("data");
    export_directory(&all, &root)?;
    write_json(
        &cfg.output_dir.join("dataset.json"),
        &DatasetManifest {
            digest: dataset_digest(&all),
            resolution: cfg.resolution,
            seed: cfg.data.seed,
            train: train.iter().map(|s| s.id.clone()).collect(),
            test: test.iter().map(|s| s.id.clone()).collect(),
        },
    )?;
    println!("wrote {} samples to {}", all.len(), root.display());
    Ok(())
}

#[derive(Serialize)]
struct InferredImage {
    file: String,
    mask: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    dice: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    iou: Option<f64>,
}

#[derive(Serialize)]
struct InferSidecar {
    bundle: String,
    seed: u64,
    config_digest: String,
    resolution: usize,
    images: Vec<InferredImage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean: Option<SegmentationMetrics>,
}

fn infer(
    cfg: &ExperimentConfig,
    seed: Option<u64>,
    bundle_path: &Path,
    input: &Path,
    masks: Option<&Path>,
) -> Result<()> {
    let mut bundle = InferenceBundle::load(bundle_path)?;
    if let Some(s) = seed {
        bundle.seed = s;
    }
    let res = bundle.codec.header().resolution;
    let (files, masks_dir) = if input.is_file() {
        (vec![input.to_path_buf()], masks.map(Path::to_path_buf))
    } else if input.join("images").is_dir() {
        let m = masks.map(Path::to_path_buf).or_else(|| Some(input.join("masks")).filter(|d| d.is_dir()));
        (png_files(&input.join("images"))?, m)
    } else {
        (png_files(input)?, masks.map(Path::to_path_buf))
    };
    if files.is_empty() {
        return Err(Error::Validation(format!("no PNG images under {}", input.display())));
    }
    let out_masks = cfg.output_dir.join("masks");
    std::fs::create_dir_all(&out_masks).map_err(|e| Error::io(&out_masks, e))?;
    let mut images = Vec::with_capacity(files.len());
    let mut scores = Vec::new();
    for (i, f) in files.iter().enumerate() {
        let name = f.file_name().expect("listed file has a name");
        let image = load_image(f, res)?;
        let mask = bundle.infer(&image, i as u64)?;
        let (w, h) = image_dimensions(f)?;
        let gray = image::imageops::resize(&mask_to_gray(&mask), w, h, image::imageops::FilterType::Nearest);
        let out = out_masks.join(name);
        gray.save(&out)?;
        let gt = match &masks_dir {
            Some(d) if d.join(name).is_file() => Some(dice_iou(&mask, &load_mask(&d.join(name), res)?)?),
            _ => None,
        };
        scores.extend(gt);
        images.push(InferredImage {
            file: f.display().to_string(),
            mask: out.display().to_string(),
            dice: gt.map(|m| m.dice),
            iou: gt.map(|m| m.iou),
        });
    }
    let sidecar = InferSidecar {
        bundle: bundle_path.display().to_string(),
        seed: bundle.seed,
        config_digest: cfg.digest(),
        resolution: res,
        mean: if scores.is_empty() { None } else { Some(mean_metrics(&scores)?) },
        images,
    };
    write_json(&cfg.output_dir.join("infer.json"), &sidecar)?;
    match &sidecar.mean {
        Some(m) => println!("{} masks written; mean Dice {:.4}, IoU {:.4}", files.len(), m.dice, m.iou),
        None => println!("{} masks written to {}", files.len(), out_masks.display()),
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    bundle: String,
    config_digest: String,
    test_digest: String,
    evaluation: StabilityResult,
}

fn eval(cfg: &ExperimentConfig, bundle_path: &Path) -> Result<()> {
    let bundle = InferenceBundle::load(bundle_path)?;
    if bundle.codec.header().resolution != cfg.resolution {
        return Err(Error::config(
            "resolution",
            format!("bundle was trained at {}, config has {}", bundle.codec.header().resolution, cfg.resolution),
        ));
    }
    let (_, test) = load_samples(cfg)?;
    let seeds = cfg.eval_seed_list();
    let evaluation = StabilityResult::from_per_seed(&seeds, &bundle.evaluate_seeds(&test, &seeds)?)?;
    let table = Table {
        name: "eval".into(),
        caption: format!("Test Dice / IoU (%) over {} inference seeds", seeds.len()),
        header: vec!["seed".into(), "Dice".into(), "IoU".into()],
        rows: seeds
            .iter()
            .zip(evaluation.per_seed_dice.iter().zip(&evaluation.per_seed_iou))
            .map(|(s, (d, i))| vec![s.to_string(), format!("{:.2}", 100.0 * d), format!("{:.2}", 100.0 * i)])
            .chain(std::iter::once(vec![
                "mean ± std".into(),
                format!("{:.2} ± {:.2}", 100.0 * evaluation.mean_dice, 100.0 * evaluation.std_dice),
                format!("{:.2}", 100.0 * evaluation.mean_iou),
            ]))
            .collect(),
    };
    let tables = cfg.output_dir.join("tables");
    std::fs::create_dir_all(&tables).map_err(|e| Error::io(&tables, e))?;
    let p = tables.join("eval.csv");
    std::fs::write(&p, table.to_csv()?).map_err(|e| Error::io(&p, e))?;
    print!("{}", table.to_text());
    write_json(
        &cfg.output_dir.join("eval.json"),
        &EvalReport {
            bundle: bundle_path.display().to_string(),
            config_digest: cfg.digest(),
            test_digest: dataset_digest(&test),
            evaluation,
        },
    )
}

fn report(dir: &Path) -> Result<()> {
    let r = ExperimentReport::load(dir)?;
    r.render(dir)?;
    print!("{}", r.to_text());
    Ok(())
}

fn execute(cmd: &Command) -> std::result::Result<(), Failure> {
    if let Command::Report { dir, common } = cmd {
        if common.dry_run {
            println!("report: would render {}", dir.display());
            return Ok(());
        }
        return Ok(report(dir)?);
    }
    let cfg = resolve_config(cmd)?;
    if cmd.common().dry_run {
        match cmd.harness() {
            Some(kind) => print!("{}", describe_plan(kind, &cfg)),
            None => print!("{}", cfg.to_resolved_string()),
        }
        return Ok(());
    }
    write_resolved(&cfg)?;
    match cmd {
        Command::SynthData { .. } => synth_data(&cfg)?,
        Command::Infer { bundle, input, masks, common } => infer(&cfg, common.seed, bundle, input, masks.as_deref())?,
        Command::Eval { bundle, .. } => eval(&cfg, bundle)?,
        _ => {
            let kind = cmd.harness().expect("remaining commands are harnesses");
            let report = run_harness(kind, &cfg, Some(&cfg.output_dir))?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.command.common().verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp_secs().init();
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error[config]: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error[runtime]: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
