//! Command-line front end: argument parsing, config layering and dispatch.
//!
//! Settings come from built-in defaults, then an optional `--config` JSON
//! file, then flags; later layers win. Every command prints the resulting
//! configuration as one JSON line before doing any work.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::dataset::{read_dataset, write_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::export::{export_maps, predicted_rasters, scene_rasters, ExportFormat};
use crate::model::Model;
use crate::runtime;
use crate::scene::{generate_samples, PropagationParams};
use crate::train::{
    evaluate, evaluate_with, finetune_heads, run_ablation, train, Ablation, BaselinePredictor, Interpolation, TrainConfig,
};

/// Exit status for success.
pub const EXIT_OK: i32 = 0;
/// Exit status for bad flags or invalid settings.
pub const EXIT_USAGE: i32 = 1;
/// Exit status for unreadable, malformed or mismatched data.
pub const EXIT_DATA: i32 = 2;
/// Exit status for a non-finite training loss.
pub const EXIT_NUMERIC: i32 = 3;

/// Scene-generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub seed: u64,
    pub scenes: usize,
    pub grid: usize,
    pub density: f64,
    pub propagation: PropagationParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { seed: 7, scenes: 96, grid: 128, density: 0.3, propagation: PropagationParams::default() }
    }
}

/// Everything a command can be configured with; the `--config` file schema.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum AblationArg {
    Stl,
    Res,
    Da,
    Att,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Stl => Ablation::Stl,
            AblationArg::Res => Ablation::Res,
            AblationArg::Da => Ablation::Da,
            AblationArg::Att => Ablation::Att,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Nearest,
    Bicubic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Pgm,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn parse_scale(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v @ (2 | 4 | 8)) => Ok(v),
        _ => Err(format!("`{s}` is not one of 2, 4, 8")),
    }
}

/// Flags shared by every command.
#[derive(Args, Debug, Default)]
struct Common {
    /// Master seed for scenes, splits, initialization and sampling.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scenes: Option<usize>,
    /// Grid side in cells.
    #[arg(long)]
    grid: Option<usize>,
    /// Target building coverage fraction.
    #[arg(long)]
    density: Option<f64>,
    /// Upscaling factor.
    #[arg(long, value_parser = parse_scale)]
    scale: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// HR training patch side.
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long, value_enum)]
    ablation: Option<AblationArg>,
    /// Backbone feature channels.
    #[arg(long)]
    width: Option<usize>,
    /// Hidden channels of each head.
    #[arg(long)]
    head_width: Option<usize>,
    /// Serial, order-fixed execution.
    #[arg(long)]
    deterministic: bool,
    /// JSON file with defaults; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DataArg {
    /// Dataset file written by gen-data.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a dataset of urban scenes.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model from scratch.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Optimize one target's head with everything else frozen.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// One of pl, rp, ds, phi, theta, los.
        #[arg(long)]
        target: String,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Train the four cumulative presets and tabulate PL errors.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Comma-separated scales; defaults to --scale.
        #[arg(long, value_delimiter = ',', value_parser = parse_scale)]
        scales: Vec<usize>,
    },
    /// Evaluate an interpolation baseline.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_enum, default_value = "bicubic")]
        method: MethodArg,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Inpaint in-building LR cells before interpolating.
        #[arg(long)]
        fill: bool,
    },
    /// Write one scene's rasters as PGM or CSV.
    Export {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Scene index; defaults to the first test scene.
        #[arg(long)]
        scene: Option<usize>,
        /// Export this model's predictions instead of ground truth.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Export this baseline's predictions instead of ground truth.
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long, value_enum, default_value = "pgm")]
        format: FormatArg,
    },
}

#[derive(Parser, Debug)]
#[command(name = "chansr", version, about = "Super-resolution of wireless channel-characteristic maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

impl Common {
    /// Defaults, then the config file, then flags.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str::<RunConfig>(&text)?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.data.seed = seed;
            cfg.train.seed = seed;
            cfg.train.model.seed = seed;
        }
        macro_rules! set {
            ($flag:ident => $($field:tt)+) => {
                if let Some(v) = self.$flag {
                    cfg.$($field)+ = v.into();
                }
            };
        }
        set!(scenes => data.scenes);
        set!(grid => data.grid);
        set!(density => data.density);
        set!(scale => train.scale);
        set!(epochs => train.epochs);
        set!(batch => train.batch_size);
        set!(patch => train.patch_size);
        set!(ablation => train.ablation);
        set!(width => train.model.width);
        set!(head_width => train.model.head_width);
        if self.deterministic {
            cfg.train.deterministic = true;
        }
        Ok(cfg)
    }
}

fn print_config(command: &str, cfg: &RunConfig) -> Result<()> {
    println!("effective-config {command} {}", serde_json::to_string(cfg)?);
    Ok(())
}

fn load_split(path: &Path, cfg: &RunConfig) -> Result<Dataset> {
    read_dataset(path)?.split(cfg.train.split_ratios, cfg.train.seed)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_text(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    path.with_file_name(format!("{stem}{suffix}"))
}

fn checkpoint_scale(model: &Model, common: &Common) -> Result<usize> {
    let scale = common.scale.unwrap_or(model.config().scale);
    if scale != model.config().scale {
        return Err(Error::ScaleMismatch { checkpoint: model.config().scale, requested: scale });
    }
    Ok(scale)
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData { common } => {
            let cfg = common.resolve()?;
            print_config("gen-data", &cfg)?;
            let d = &cfg.data;
            let samples = generate_samples(d.seed, d.scenes, d.grid, d.density, &d.propagation)?;
            let out = common.out.unwrap_or_else(|| PathBuf::from("data.csrd"));
            write_dataset(&Dataset::new(samples)?, &out)?;
            log::info!("wrote {} scenes to {}", d.scenes, out.display());
        }
        Command::Train { common, data } => {
            let cfg = common.resolve()?;
            print_config("train", &cfg)?;
            let dataset = load_split(&data.data, &cfg)?;
            let outcome = train(&cfg.train, &dataset)?;
            let out = common.out.unwrap_or_else(|| PathBuf::from("model.csrm"));
            outcome.best.save(&out)?;
            outcome.last.save(&sibling(&out, ".last.csrm"))?;
            write_text(&sibling(&out, ".history.csv"), &outcome.history.to_csv())?;
            println!("best epoch {} of {}", outcome.best_epoch, cfg.train.epochs);
        }
        Command::Finetune { common, data, checkpoint, target } => {
            let cfg = common.resolve()?;
            print_config("finetune", &cfg)?;
            let model = Model::load(&checkpoint)?;
            let dataset = load_split(&data.data, &cfg)?;
            let outcome = finetune_heads(&model, &dataset, &target, &cfg.train)?;
            let out = common.out.unwrap_or_else(|| sibling(&checkpoint, &format!(".{target}.csrm")));
            outcome.model.save(&out)?;
            println!("{target} val error {:.6} -> {:.6}", outcome.before, outcome.after);
        }
        Command::Eval { common, data, checkpoint, split } => {
            let cfg = common.resolve()?;
            print_config("eval", &cfg)?;
            let model = Model::load(&checkpoint)?;
            let scale = checkpoint_scale(&model, &common)?;
            let dataset = load_split(&data.data, &cfg)?;
            let report = evaluate(&model, &dataset, split.into(), scale)?;
            emit(common.out.as_deref(), &report.to_csv())?;
        }
        Command::Ablate { common, data, scales } => {
            let cfg = common.resolve()?;
            print_config("ablate", &cfg)?;
            let dataset = load_split(&data.data, &cfg)?;
            let scales = if scales.is_empty() { vec![cfg.train.scale] } else { scales };
            let run = run_ablation(&cfg.train, &dataset, &scales)?;
            emit(common.out.as_deref(), &run.table.to_csv())?;
        }
        Command::Baseline { common, data, method, split, fill } => {
            let cfg = common.resolve()?;
            print_config("baseline", &cfg)?;
            let dataset = load_split(&data.data, &cfg)?;
            let predictor = BaselinePredictor { method: method.into(), scale: cfg.train.scale, fill_buildings: fill };
            let report = evaluate_with(&predictor, &dataset, &dataset.indices(split.into())?)?;
            emit(common.out.as_deref(), &report.to_csv())?;
        }
        Command::Export { common, data, scene, checkpoint, method, format } => {
            let cfg = common.resolve()?;
            print_config("export", &cfg)?;
            let dataset = load_split(&data.data, &cfg)?;
            let index = scene.unwrap_or_else(|| crate::export::first_of_split(&dataset, Split::Test));
            let rasters = match (checkpoint, method) {
                (Some(_), Some(_)) => {
                    return Err(Error::InvalidArgument("--checkpoint and --method are mutually exclusive".into()))
                }
                (Some(path), None) => {
                    let model = Model::load(&path)?;
                    checkpoint_scale(&model, &common)?;
                    predicted_rasters(&model, &dataset, index)?
                }
                (None, Some(m)) => {
                    let predictor = BaselinePredictor { method: m.into(), scale: cfg.train.scale, fill_buildings: true };
                    predicted_rasters(&predictor, &dataset, index)?
                }
                (None, None) => scene_rasters(&dataset, index)?,
            };
            let dir = common.out.unwrap_or_else(|| PathBuf::from("maps"));
            let format = match format {
                FormatArg::Pgm => ExportFormat::Pgm,
                FormatArg::Csv => ExportFormat::Csv,
            };
            for path in export_maps(&rasters, &dir, format)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

impl From<MethodArg> for Interpolation {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Nearest => Interpolation::Nearest,
            MethodArg::Bicubic => Interpolation::Bicubic,
        }
    }
}

/// Exit status for an error.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Config { .. } | Error::InvalidArgument(_) | Error::UnknownTarget(_) => EXIT_USAGE,
        Error::Divergence { .. } => EXIT_NUMERIC,
        Error::Shape(_)
        | Error::EmptyMask
        | Error::ScaleMismatch { .. }
        | Error::Format(_)
        | Error::Io { .. }
        | Error::Json(_) => EXIT_DATA,
    }
}

fn is_deterministic(command: &Command) -> bool {
    match command {
        Command::GenData { common }
        | Command::Train { common, .. }
        | Command::Finetune { common, .. }
        | Command::Eval { common, .. }
        | Command::Ablate { common, .. }
        | Command::Baseline { common, .. }
        | Command::Export { common, .. } => common.deterministic,
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit status.
pub fn parse_and_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if is_deterministic(&cli.command) {
        runtime::set_deterministic(true);
    }
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
