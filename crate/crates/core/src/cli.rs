//! The `dgmnet` command-line tool.
//!
//! Exit codes: 0 success, 2 configuration or validation error, 3 I/O
//! error, 4 output exists and `--overwrite` was not given, 5 numeric
//! failure during training.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use log::info;

use crate::arch::Variant;
use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, ExperimentConfig};
use crate::figures;
use crate::generator::GeneratorError;
use crate::metrics::{score_case, CaseSegmenter, MetricReport};
use crate::phantoms::{self, Manifest, PhantomError};
use crate::preprocess::{preprocess_pair, IntensityStats, PreprocessConfig};
use crate::trainer::{self, AblationReport, ModelSegmenter, Split, SplitName, TrainError};
use crate::volume::{CaseRecord, Modality};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_EXISTS: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        let code = if matches!(e, ConfigError::Io { .. }) { EXIT_IO } else { EXIT_CONFIG };
        Self::new(code, e.to_string())
    }
}

impl From<PhantomError> for CliError {
    fn from(e: PhantomError) -> Self {
        let code = match &e {
            PhantomError::Io { .. } | PhantomError::Volume(_) | PhantomError::Manifest(_) => EXIT_IO,
            PhantomError::Config(_) | PhantomError::Degenerate { .. } => EXIT_CONFIG,
        };
        Self::new(code, e.to_string())
    }
}

fn checkpoint_code(e: &CheckpointError) -> i32 {
    match e {
        CheckpointError::Io { .. } | CheckpointError::Json { .. } | CheckpointError::Hash { .. } | CheckpointError::Format(_) => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::new(checkpoint_code(&e), e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::NonFinite { .. } | TrainError::GeneratorChanged { .. } => EXIT_NUMERIC,
            TrainError::Generator(GeneratorError::NonFinite(_)) => EXIT_NUMERIC,
            TrainError::Io { .. } | TrainError::Phantom(_) => EXIT_IO,
            TrainError::Checkpoint(c) => checkpoint_code(c),
            _ => EXIT_CONFIG,
        };
        Self::new(code, e.to_string())
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::new(EXIT_IO, format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "dgmnet", version, about = "Shape-prior segmentation experiments on synthetic phantoms")]
pub struct Cli {
    /// Flat `section.key = value` config file; defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides phantom.rng_seed, train.seed and generator.seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory of the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Replace existing outputs instead of failing with exit code 4.
    #[arg(long, global = true)]
    pub overwrite: bool,
    /// Force train.deterministic = true.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the two-modality phantom dataset and its manifest.
    GenerateData,
    /// Cross-validate and fit the shape generator on high-contrast masks.
    TrainGenerator {
        /// Dataset directory (default: paths.data_dir).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train one segmentation network and score it on the test split.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Generator checkpoint directory; required for DGMNet.
        #[arg(long)]
        generator: Option<PathBuf>,
        /// Overrides model.variant.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long, default_value = "low_contrast")]
        modality: String,
    },
    /// Score a checkpoint on one split and write overlay figures.
    Evaluate {
        /// Model checkpoint directory, or a run directory holding `best/`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// train, val, test or all.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "low_contrast")]
        modality: String,
    },
    /// Train every variant and emit the comparison table.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Re-emit the table from an earlier ablation directory.
        #[arg(long)]
        from_runs: Option<PathBuf>,
    },
}

const COMMAND_KEYS: [(&str, &[&str]); 5] = [
    ("generate-data", &["phantom.", "paths.data_dir"]),
    (
        "train-generator",
        &["preprocess.", "model.max_slices", "model.generator_", "generator.", "train.seed", "train.test_fraction", "train.validation_fraction", "paths."],
    ),
    ("train", &["preprocess.", "model.", "loss.", "train.", "paths."]),
    ("evaluate", &["preprocess.", "train.seed", "train.test_fraction", "train.validation_fraction", "paths."]),
    ("ablate", &["preprocess.", "model.", "generator.", "loss.", "train.", "paths."]),
];

/// Config keys read by a subcommand.
pub fn command_keys(name: &str) -> Vec<String> {
    let prefixes = COMMAND_KEYS.iter().find(|(n, _)| *n == name).map(|(_, p)| *p).unwrap_or(&[]);
    ExperimentConfig::keys().into_iter().filter(|k| prefixes.iter().any(|p| k.starts_with(p))).collect()
}

pub fn command() -> clap::Command {
    let mut cmd = Cli::command();
    for (name, _) in COMMAND_KEYS {
        let keys = command_keys(name);
        cmd = cmd.mut_subcommand(name, |c| c.after_help(format!("Config keys read:\n  {}", keys.join("\n  "))));
    }
    cmd
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_CONFIG;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::read(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if cli.deterministic {
        cfg.train.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn guard(path: &Path, overwrite: bool) -> Result<(), CliError> {
    if path.exists() && !overwrite {
        return Err(CliError::new(EXIT_EXISTS, format!("{} exists; pass --overwrite to replace it", path.display())));
    }
    Ok(())
}

fn parse_modality(s: &str) -> Result<Modality, CliError> {
    Modality::parse(s).ok_or_else(|| CliError::new(EXIT_CONFIG, format!("unknown modality `{s}` (high_contrast or low_contrast)")))
}

fn data_dir(cfg: &ExperimentConfig, data: &Option<PathBuf>) -> PathBuf {
    data.clone().unwrap_or_else(|| PathBuf::from(&cfg.paths.data_dir))
}

fn read_manifest(dir: &Path) -> Result<Manifest, CliError> {
    if !dir.join(phantoms::MANIFEST_FILE).exists() {
        return Err(CliError::new(EXIT_IO, format!("no dataset at {} (run `dgmnet generate-data` first)", dir.display())));
    }
    Ok(Manifest::read(dir)?)
}

fn config_split(cfg: &ExperimentConfig, manifest: &Manifest) -> Result<Split, CliError> {
    Ok(Split::new(&manifest.case_ids(), cfg.train.test_fraction, cfg.train.validation_fraction, cfg.train.seed)?)
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let runs = PathBuf::from(&cfg.paths.runs_dir);
    match &cli.command {
        Command::GenerateData => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.paths.data_dir));
            let manifest_path = out.join(phantoms::MANIFEST_FILE);
            guard(&manifest_path, cli.overwrite)?;
            let m = phantoms::generate_dataset(&cfg.phantom, &out)?;
            info!("wrote {} volumes", 2 * m.rows.len());
            println!("{}", manifest_path.display());
        }
        Command::TrainGenerator { data } => {
            let out = cli.out.clone().unwrap_or_else(|| runs.join("generator"));
            guard(&out.join(checkpoint::MANIFEST), cli.overwrite)?;
            let manifest = read_manifest(&data_dir(&cfg, data))?;
            let high = manifest.load(Modality::HighContrast)?;
            let split = config_split(&cfg, &manifest)?;
            let rep = trainer::train_split_generator(&high, &split, &cfg.ablation_config(), cfg.generator.seed)?;
            fs::create_dir_all(&out).map_err(io(&out))?;
            fs::write(out.join("folds.csv"), rep.to_csv()).map_err(io(&out))?;
            fs::write(out.join("split.csv"), split.to_csv()).map_err(io(&out))?;
            fs::write(out.join("config.txt"), cfg.to_text()).map_err(io(&out))?;
            checkpoint::save_generator(&rep.generator, &out, Some(Modality::HighContrast))?;
            println!("mean fold reconstruction DSC {:.4}", rep.mean_dsc());
            println!("{}", out.display());
        }
        Command::Train { data, generator, variant, modality } => {
            let variant = match variant {
                Some(v) => Variant::parse(v).ok_or_else(|| CliError::new(EXIT_CONFIG, format!("unknown variant `{v}`")))?,
                None => cfg.model.variant,
            };
            let modality = parse_modality(modality)?;
            let gen = match (variant, generator) {
                (Variant::DgmNet, None) => {
                    return Err(CliError::new(
                        EXIT_CONFIG,
                        "variant dgmnet needs a frozen generator: pass --generator <dir> (create one with `dgmnet train-generator`)",
                    ))
                }
                (Variant::DgmNet, Some(dir)) => {
                    let (g, _) = checkpoint::load_generator(dir)?;
                    if !g.is_frozen() {
                        return Err(CliError::new(EXIT_CONFIG, format!("generator at {} is not frozen", dir.display())));
                    }
                    if *g.spec() != cfg.generator_spec() {
                        return Err(CliError::new(EXIT_CONFIG, "generator checkpoint does not match model.generator_* and preprocess.target_size"));
                    }
                    Some(g)
                }
                (_, _) => None,
            };
            let out = cli.out.clone().unwrap_or_else(|| runs.join(format!("{}_{}", variant.key(), modality)));
            guard(&out.join("run_record.json"), cli.overwrite)?;
            let manifest = read_manifest(&data_dir(&cfg, data))?;
            let cases = manifest.load(modality)?;
            let split = config_split(&cfg, &manifest)?;
            let mut acfg = cfg.ablation_config();
            acfg.train = cfg.train_config(variant);
            fs::create_dir_all(&out).map_err(io(&out))?;
            fs::write(out.join("config.txt"), cfg.to_text()).map_err(io(&out))?;
            let (outcome, report) = trainer::run_variant(&cases, &split, variant, gen.as_ref(), &acfg, cfg.train.seed, Some(&out))?;
            println!(
                "{variant}: best epoch {} (val DSC {:.4}), test DSC {}",
                outcome.record.best_epoch,
                outcome.record.best_val_dsc,
                report.dsc().cell()
            );
            println!("{}", out.display());
        }
        Command::Evaluate { checkpoint: ck, data, split, modality } => {
            let modality = parse_modality(modality)?;
            let ck_dir = if ck.join(trainer::BEST_DIR).join(checkpoint::MANIFEST).exists() { ck.join(trainer::BEST_DIR) } else { ck.clone() };
            let (model, man) = checkpoint::load_model(&ck_dir)?;
            let manifest = read_manifest(&data_dir(&cfg, data))?;
            let cases = manifest.load(modality)?;
            let which = match split.as_str() {
                "train" => Some(SplitName::Train),
                "val" => Some(SplitName::Val),
                "test" => Some(SplitName::Test),
                "all" => None,
                other => return Err(CliError::new(EXIT_CONFIG, format!("unknown split `{other}`"))),
            };
            let selected = match which {
                None => cases,
                Some(w) => {
                    let run_split = ck_dir.parent().map(|p| p.join("split.csv")).filter(|p| p.exists());
                    let s = match run_split {
                        Some(p) => Split::from_csv(&fs::read_to_string(&p).map_err(io(&p))?)?,
                        None => config_split(&cfg, &manifest)?,
                    };
                    s.select(&cases, w)
                }
            };
            let out = cli.out.clone().unwrap_or_else(|| runs.join(format!("evaluate_{split}")));
            guard(&out.join("metrics.csv"), cli.overwrite)?;
            let pre = PreprocessConfig { target_size: (model.spec.input_size.1, model.spec.input_size.0), ..cfg.preprocess.clone() };
            let (report, n) = evaluate_into(&ModelSegmenter::new(&model), &selected, &pre, trainer::checkpoint_stats(&man), &out)?;
            println!("{} cases, {n} overlays, DSC {}", report.rows.len(), report.dsc().cell());
            println!("{}", out.join("metrics.csv").display());
        }
        Command::Ablate { data, from_runs } => {
            let report = match from_runs {
                Some(dir) => AblationReport::from_runs(dir)?,
                None => {
                    let out = cli.out.clone().unwrap_or_else(|| runs.join("ablation"));
                    guard(&out.join("ablation.json"), cli.overwrite)?;
                    let manifest = read_manifest(&data_dir(&cfg, data))?;
                    trainer::run_ablation(&manifest, &cfg.ablation_config(), cfg.train.seed, Some(&out))?
                }
            };
            if let (Some(_), Some(out)) = (from_runs, &cli.out) {
                guard(&out.join("ablation.csv"), cli.overwrite)?;
                fs::create_dir_all(out).map_err(io(out))?;
                fs::write(out.join("ablation.csv"), report.to_csv()).map_err(io(out))?;
                fs::write(out.join("ablation.txt"), report.to_table()).map_err(io(out))?;
            }
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

/// Segment and score `cases`, writing `metrics.csv` and one overlay PNG
/// per slice with non-empty ground truth under `out/overlays`. Returns the
/// report and the number of overlays.
pub fn evaluate_into(
    segmenter: &dyn CaseSegmenter,
    cases: &[CaseRecord],
    pre: &PreprocessConfig,
    stats: Option<IntensityStats>,
    out: &Path,
) -> Result<(MetricReport, usize), CliError> {
    let overlays = out.join("overlays");
    fs::create_dir_all(&overlays).map_err(io(&overlays))?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut count = 0;
    for case in cases {
        let (img, mask) = match preprocess_pair(&case.image, &case.mask, pre, stats) {
            Ok(p) => p,
            Err(e) => {
                failures.push((case.case_id.clone(), e.to_string()));
                continue;
            }
        };
        let scored = segmenter.segment(&case.case_id, &img).and_then(|prob| {
            let row = score_case(&case.case_id, &prob, &mask)?;
            Ok((prob, row))
        });
        match scored {
            Ok((prob, row)) => {
                let pred = crate::volume::binarize(&prob, 0.5).map_err(|e| CliError::new(EXIT_CONFIG, e.to_string()))?;
                count += figures::write_case_overlays(&overlays, &case.case_id, &img, &mask, &pred).map_err(io(&overlays))?.len();
                rows.push(row);
            }
            Err(e) => failures.push((case.case_id.clone(), e)),
        }
    }
    let mut report = MetricReport::from_rows(rows);
    report.failures = failures;
    let path = out.join("metrics.csv");
    fs::write(&path, report.to_csv()).map_err(io(&path))?;
    Ok((report, count))
}
