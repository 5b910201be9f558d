//! Command-line front end. Every command writes its artifacts plus a
//! `manifest.json` echoing the fully resolved configuration.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::checkpoint::{load_denoiser, save_denoiser};
use crate::classifier::{train_classifier, Classifier, ClassifierConfig};
use crate::dataio::{
    load_dataset, load_image_dir, synth_dataset_with, synth_single_blob, synth_split, write_dataset, write_image_dir,
    Dataset, PairedPatch, SplitName, SynthConfig,
};
use crate::denoiser::{checkpoint_to_dir, train, ArchConfig, DenoiserPair, TrainConfig};
use crate::diffusion::{sample_ihc_batch, Orientation, PathMask};
use crate::error::{ensure, Error, Result};
use crate::image::{mean_color, Image};
use crate::perturb::{run_battery, standard_battery, Perturbation};
use crate::quality::{evaluate_pairs, ordinal, quality_rank, QualityResult};
use crate::saliency::{inside_outside_means, rise_saliency, RiseConfig};
use crate::schedules::{NoiseShape, RestorationShape, SchedulePair, DEFAULT_TERMINAL_NOISE};
use crate::sfs::{stage_robustness, ClassifierStage, SfsReport, Stage, StageRobustness};

pub const MANIFEST_VERSION: u32 = 1;
const SAMPLE_CHUNK: usize = 16;

#[derive(Parser, Debug, Serialize, Deserialize)]
#[command(name = "stain-diffusion", version, about = "H&E to IHC virtual staining with dual-path diffusion")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct Global {
    /// Random seed for every stochastic step.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// JSON or TOML file whose keys override command-line flags.
    #[arg(long, global = true)]
    #[serde(skip_deserializing)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic paired dataset.
    SynthData(SynthArgs),
    /// Train the restoration and noise predictors.
    Train(TrainArgs),
    /// Generate virtual IHC images for a dataset split.
    Sample(SampleArgs),
    /// Score generated images against real IHC.
    Evaluate(EvaluateArgs),
    /// Run the spatial perturbation battery on real IHC.
    Perturb(PerturbArgs),
    /// RISE saliency maps over the reverse trajectory.
    Saliency(SaliencyArgs),
    /// Train the HER2 classifier with stage checkpoints.
    Classifier(ClassifierArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthData(_) => "synth-data",
            Command::Train(_) => "train",
            Command::Sample(_) => "sample",
            Command::Evaluate(_) => "evaluate",
            Command::Perturb(_) => "perturb",
            Command::Saliency(_) => "saliency",
            Command::Classifier(_) => "classifier",
        }
    }
}

const COMMANDS: [&str; 7] = ["synth-data", "train", "sample", "evaluate", "perturb", "saliency", "classifier"];

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Probabilities of HER2 0, 1+, 2+, 3+.
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.25,0.25,0.25")]
    pub class_balance: Vec<f64>,
    #[arg(long, default_value_t = 0.25)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub misalign_px: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 20)]
    pub timesteps: usize,
    #[arg(long, default_value = "linear")]
    pub noise_shape: NoiseShape,
    #[arg(long, default_value = "linear")]
    pub restoration_shape: RestorationShape,
    #[arg(long, default_value_t = DEFAULT_TERMINAL_NOISE)]
    pub terminal_noise: f64,
    #[arg(long, default_value = "he-minus-ihc")]
    pub orientation: Orientation,
    #[arg(long, default_value_t = 16)]
    pub base_width: usize,
    #[arg(long, default_value_t = 32)]
    pub t_embedding_dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub w_res: f64,
    #[arg(long, default_value_t = 1.0)]
    pub w_eps: f64,
    #[arg(long, default_value_t = 10)]
    pub checkpoint_interval: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: SplitName,
    /// Sampling paths: both, restoration or noise.
    #[arg(long, default_value = "both")]
    pub mask: PathMask,
    /// Expected number of timesteps; must match the checkpoint when given.
    #[arg(long)]
    pub timesteps: Option<usize>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateArgs {
    /// Dataset directory holding the real IHC images and labels.
    #[arg(long)]
    pub real: PathBuf,
    /// Directories of generated `<id>.png` images, one per method.
    #[arg(long, num_args = 1..)]
    #[serde(default)]
    pub generated: Vec<PathBuf>,
    /// Method names for `--generated`, in order.
    #[arg(long, value_delimiter = ',')]
    #[serde(default)]
    pub names: Vec<String>,
    /// Sample internally from this checkpoint instead of reading directories.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Sampling paths evaluated in checkpoint mode.
    #[arg(long, value_delimiter = ',', default_value = "both")]
    pub masks: Vec<PathMask>,
    /// Independent sampling runs per method (checkpoint mode).
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    #[arg(long, default_value = "test")]
    pub split: SplitName,
    /// Classifier checkpoint file, or a directory written by `classifier`.
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    #[arg(long, default_value = "properly-fit")]
    pub stage: Stage,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct PerturbArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Classifier checkpoint file, or a directory written by `classifier`.
    #[arg(long)]
    pub classifier: PathBuf,
    #[arg(long, default_value = "properly-fit")]
    pub stage: Stage,
    #[arg(long, default_value = "test")]
    pub split: SplitName,
    /// Perturbations such as `translate:5,rotate:10,elastic:high`; default is the nine-row battery.
    #[arg(long, value_delimiter = ',')]
    #[serde(default)]
    pub perturbations: Vec<Perturbation>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory; its mean H&E colour fills masked regions.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Patch id to explain (default: first test patch).
    #[arg(long)]
    pub id: Option<String>,
    /// Explain a generated single-blob patch of this HER2 score instead.
    #[arg(long)]
    pub blob_her2: Option<u8>,
    /// Probed timesteps (default: T, T/2, 1).
    #[arg(long, value_delimiter = ',')]
    #[serde(default)]
    pub timesteps: Vec<usize>,
    #[arg(long, default_value_t = 1000)]
    pub n_masks: usize,
    #[arg(long, default_value_t = 0.5)]
    pub keep_prob: f64,
    #[arg(long, default_value_t = 8)]
    pub cell: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 24)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    /// Use the four HER2 scores instead of the binary split.
    #[arg(long)]
    #[serde(default)]
    pub four_class: bool,
    /// Nominal underfit, properly-fit and overfit epochs.
    #[arg(long, value_delimiter = ',')]
    #[serde(default)]
    pub stage_epochs: Vec<usize>,
}

/// Parse arguments, apply the config file, run, and map errors to an exit code.
pub fn main() -> ExitCode {
    match run_from(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(2)
        }
    }
}

/// Single-line `error: kind=<kind> msg=<message>` rendering.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace(['\n', '\r'], " ");
    format!("error: kind={} msg={}", e.kind(), msg)
}

pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            return Err(Error::InvalidArgument(first));
        }
    };
    let cli = resolve(cli)?;
    run(&cli)
}

fn load_config(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_toml = path.extension().and_then(|e| e.to_str()) == Some("toml");
    if is_toml {
        let v: toml::Value = toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        serde_json::to_value(v).map_err(Error::from)
    } else {
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

fn override_keys(target: &mut Map<String, Value>, global: &mut Map<String, Value>, source: &Map<String, Value>, command: &str) -> Result<()> {
    for (key, value) in source {
        let key = key.replace('-', "_");
        if COMMANDS.contains(&key.replace('_', "-").as_str()) {
            if key.replace('_', "-") == command {
                let section = value.as_object().ok_or_else(|| Error::Parse(format!("config section `{key}` must be a table")))?;
                override_keys(target, global, section, command)?;
            }
            continue;
        }
        if global.contains_key(&key) {
            global.insert(key, value.clone());
        } else if key != "command" && target.contains_key(&key) {
            target.insert(key, value.clone());
        } else {
            return Err(Error::InvalidArgument(format!("config key `{key}` does not apply to `{command}`")));
        }
    }
    Ok(())
}

/// Apply the config file on top of the parsed flags.
pub fn resolve(cli: Cli) -> Result<Cli> {
    let Some(path) = cli.global.config.clone() else {
        return Ok(cli);
    };
    let config = load_config(&path)?;
    let source = config.as_object().ok_or_else(|| Error::Parse(format!("{}: top level must be a table", path.display())))?;
    let command = cli.command.name();
    let mut global = match serde_json::to_value(&cli.global)? {
        Value::Object(m) => m,
        _ => unreachable!("struct serializes to an object"),
    };
    let mut target = match serde_json::to_value(&cli.command)? {
        Value::Object(m) => m,
        _ => unreachable!("tagged enum serializes to an object"),
    };
    override_keys(&mut target, &mut global, source, command)?;
    let parse = |e: serde_json::Error| Error::Parse(format!("{}: {e}", path.display()));
    let mut global: Global = serde_json::from_value(Value::Object(global)).map_err(parse)?;
    global.config = Some(path.clone());
    let command: Command = serde_json::from_value(Value::Object(target)).map_err(parse)?;
    Ok(Cli { global, command })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn write_manifest(cli: &Cli) -> Result<()> {
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let manifest = json!({
        "format_version": MANIFEST_VERSION,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "command": cli.command.name(),
        "global": cli.global,
        "config": cli.command,
        "timestamp_unix": timestamp,
    });
    write_json(&cli.global.out.join("manifest.json"), &manifest)
}

pub fn run(cli: &Cli) -> Result<()> {
    let (g, out) = (&cli.global, cli.global.out.as_path());
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    match &cli.command {
        Command::SynthData(a) => cmd_synth(a, g.seed, out)?,
        Command::Train(a) => cmd_train(a, g.seed, out)?,
        Command::Sample(a) => cmd_sample(a, g.seed, out)?,
        Command::Evaluate(a) => cmd_evaluate(a, g.seed, out)?,
        Command::Perturb(a) => cmd_perturb(a, g.seed, out)?,
        Command::Saliency(a) => cmd_saliency(a, g.seed, out)?,
        Command::Classifier(a) => cmd_classifier(a, g.seed, out)?,
    }
    write_manifest(cli)
}

fn cmd_synth(a: &SynthArgs, seed: u64, out: &Path) -> Result<()> {
    ensure!(a.class_balance.len() == 4, InvalidArgument, "--class-balance needs 4 values, got {}", a.class_balance.len());
    let balance = [a.class_balance[0], a.class_balance[1], a.class_balance[2], a.class_balance[3]];
    let cfg = SynthConfig { n: a.n, size: a.size, class_balance: balance, seed, misalign_px: a.misalign_px, ..SynthConfig::default() };
    let patches = synth_dataset_with(&cfg)?;
    let split = synth_split(&patches, a.test_fraction, seed)?;
    write_dataset(out, &patches, &split)?;
    let mut counts = [0usize; 4];
    for p in &patches {
        counts[p.her2 as usize] += 1;
    }
    let summary = format!(
        "# Synthetic dataset\n\n{} pairs of {}x{} px; HER2 0/1+/2+/3+ counts {:?}; train {}, val {}, test {}.\n",
        patches.len(),
        a.size,
        a.size,
        counts,
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    write_text(&out.join("README.md"), &summary)
}

fn cmd_train(a: &TrainArgs, seed: u64, out: &Path) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let schedule = SchedulePair::new(a.timesteps, a.noise_shape, a.restoration_shape, a.terminal_noise)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        timesteps: a.timesteps,
        w_res: a.w_res,
        w_eps: a.w_eps,
        seed,
        checkpoint_interval: a.checkpoint_interval,
    };
    cfg.validate()?;
    let arch = ArchConfig { base_width: a.base_width, t_embedding_dim: a.t_embedding_dim };
    let mut pair = DenoiserPair::new_unet(&arch, schedule, a.orientation, seed);
    let data: Vec<PairedPatch> = ds.select(SplitName::Train).into_iter().cloned().collect();
    let ckpt_dir = out.join("checkpoints");
    let mut cb = checkpoint_to_dir(&ckpt_dir);
    let log = train(&mut pair, &data, &cfg, Some(&mut cb))?;
    save_denoiser(&out.join("denoiser.json"), &pair, Some(&cfg))?;
    write_text(&out.join("loss.csv"), &log.to_csv())?;
    let (first, last) = (&log.epochs[0].loss, &log.epochs[log.epochs.len() - 1].loss);
    let report = format!(
        "# Training\n\n{} pairs, {} epochs, T = {}.\n\n| | restoration | noise | combined |\n|---|---|---|---|\n| first epoch | {:.5} | {:.5} | {:.5} |\n| last epoch | {:.5} | {:.5} | {:.5} |\n",
        data.len(),
        cfg.epochs,
        cfg.timesteps,
        first.restoration,
        first.noise,
        first.combined,
        last.restoration,
        last.noise,
        last.combined
    );
    write_text(&out.join("report.md"), &report)
}

fn patch_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64)
}

/// Sample one image per record, seeded by position.
pub fn sample_records(pair: &DenoiserPair, records: &[&PairedPatch], mask: PathMask, seed: u64) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(records.len());
    for (c, chunk) in records.chunks(SAMPLE_CHUNK).enumerate() {
        let conds: Vec<Image> = chunk.iter().map(|p| p.he.clone()).collect();
        let seeds: Vec<u64> = (0..chunk.len()).map(|i| patch_seed(seed, c * SAMPLE_CHUNK + i)).collect();
        out.extend(sample_ihc_batch(&conds, pair, &pair.schedule, mask, &seeds)?);
    }
    Ok(out)
}

fn load_checked_denoiser(path: &Path, timesteps: Option<usize>) -> Result<DenoiserPair> {
    let pair = load_denoiser(path)?;
    if let Some(t) = timesteps {
        if t != pair.schedule.timesteps {
            return Err(Error::Version(format!(
                "{}: checkpoint schedule has T = {}, requested T = {t}",
                path.display(),
                pair.schedule.timesteps
            )));
        }
    }
    Ok(pair)
}

fn cmd_sample(a: &SampleArgs, seed: u64, out: &Path) -> Result<()> {
    let pair = load_checked_denoiser(&a.checkpoint, a.timesteps)?;
    let ds = load_dataset(&a.data)?;
    let records = ds.select(a.split);
    ensure!(!records.is_empty(), InvalidArgument, "split {:?} of {} is empty", a.split, a.data.display());
    let generated = sample_records(&pair, &records, a.mask, seed)?;
    write_image_dir(out, records.iter().map(|p| p.id.as_str()).zip(generated.iter()))
}

/// Load a classifier file, or one stage from a directory written by `classifier`.
pub fn load_classifier(path: &Path, stage: Stage) -> Result<Classifier> {
    if path.is_dir() {
        Classifier::load(&path.join(format!("classifier_{}.json", stage.name())))
    } else {
        Classifier::load(path)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: String,
    pub ssim: f64,
    #[serde(with = "crate::quality::inf_as_null")]
    pub psnr_db: f64,
    pub n_pairs: usize,
    pub runs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sfs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sfs_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sfs_report: Option<SfsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage_robustness: Option<StageRobustness>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quality_rank: Option<usize>,
}

fn mean_std(v: &[f64]) -> (f64, Option<f64>) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, None);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

struct RunMetrics {
    quality: QualityResult,
    sfs: Option<SfsReport>,
    stages: Option<StageRobustness>,
}

fn score_run(
    real: &[&PairedPatch],
    generated: &[&Image],
    classifier: Option<&Classifier>,
    stage_models: &[(Stage, Classifier)],
) -> Result<RunMetrics> {
    let pairs: Vec<(&Image, &Image)> = generated.iter().copied().zip(real.iter().map(|p| &p.ihc)).collect();
    let quality = evaluate_pairs(&pairs)?;
    let real_imgs: Vec<&Image> = real.iter().map(|p| &p.ihc).collect();
    let sfs = match classifier {
        Some(c) => {
            let truth: Vec<usize> = real.iter().map(|p| c.label(p)).collect();
            Some(c.sfs(&real_imgs, generated, &truth)?)
        }
        None => None,
    };
    let stages = if stage_models.is_empty() {
        None
    } else {
        let mut reports = Vec::new();
        for (stage, model) in stage_models {
            let truth: Vec<usize> = real.iter().map(|p| model.label(p)).collect();
            let mut r = model.sfs(&real_imgs, generated, &truth)?;
            r.classifier_stage = Some(model.stage.clone().unwrap_or(ClassifierStage {
                stage: *stage,
                epoch: model.epochs_trained,
                train_acc: r.acc_real,
                test_acc: r.acc_real,
            }));
            reports.push(r);
        }
        Some(stage_robustness(&reports)?)
    };
    Ok(RunMetrics { quality, sfs, stages })
}

fn aggregate(method: String, runs: Vec<RunMetrics>) -> MethodMetrics {
    let (ssim, ssim_std) = mean_std(&runs.iter().map(|r| r.quality.ssim).collect::<Vec<_>>());
    let (psnr_db, psnr_std) = mean_std(&runs.iter().map(|r| r.quality.psnr_db).collect::<Vec<_>>());
    let with_sfs: Vec<&SfsReport> = runs.iter().filter_map(|r| r.sfs.as_ref()).collect();
    let (accuracy, accuracy_std, sfs, sfs_std) = if with_sfs.is_empty() {
        (None, None, None, None)
    } else {
        let (a, asd) = mean_std(&with_sfs.iter().map(|r| r.acc_gen).collect::<Vec<_>>());
        let (s, ssd) = mean_std(&with_sfs.iter().map(|r| r.sfs).collect::<Vec<_>>());
        (Some(a), asd, Some(s), ssd)
    };
    let n_runs = runs.len();
    let first = runs.into_iter().next().expect("at least one run");
    MethodMetrics {
        method,
        ssim,
        psnr_db,
        n_pairs: first.quality.n_pairs,
        runs: n_runs,
        ssim_std,
        psnr_std,
        accuracy,
        accuracy_std,
        sfs,
        sfs_std,
        sfs_report: if n_runs == 1 { first.sfs } else { None },
        stage_robustness: first.stages,
        quality_rank: None,
    }
}

fn pm(mean: f64, std: Option<f64>) -> String {
    let m = if mean.is_finite() { format!("{mean:.4}") } else { "Inf".to_string() };
    match std {
        Some(s) => format!("{m} ± {s:.4}"),
        None => m,
    }
}

pub fn metrics_markdown(methods: &[MethodMetrics]) -> String {
    let mut s = String::from("| Method | SSIM | PSNR (dB) | Accuracy | SFS | Quality Rank |\n|---|---|---|---|---|---|\n");
    for m in methods {
        let opt = |v: Option<f64>, sd: Option<f64>| v.map(|v| pm(v, sd)).unwrap_or_else(|| "-".into());
        s += &format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            m.method,
            pm(m.ssim, m.ssim_std),
            pm(m.psnr_db, m.psnr_std),
            opt(m.accuracy, m.accuracy_std),
            opt(m.sfs, m.sfs_std),
            m.quality_rank.map(ordinal).unwrap_or_else(|| "-".into())
        );
    }
    for m in methods {
        if let Some(st) = &m.stage_robustness {
            s += &format!("\n## Classifier stages: {}\n\n{}", m.method, st.to_markdown());
        }
    }
    s
}

fn cmd_evaluate(a: &EvaluateArgs, seed: u64, out: &Path) -> Result<()> {
    ensure!(a.runs >= 1, InvalidArgument, "--runs must be >= 1");
    let ds = load_dataset(&a.real)?;
    let records = ds.select(a.split);
    ensure!(!records.is_empty(), InvalidArgument, "split {:?} of {} is empty", a.split, a.real.display());
    let classifier = a.classifier.as_deref().map(|p| load_classifier(p, a.stage)).transpose()?;
    let stage_models: Vec<(Stage, Classifier)> = match a.classifier.as_deref() {
        Some(dir) if dir.is_dir() => Stage::ALL.iter().map(|&s| Ok((s, load_classifier(dir, s)?))).collect::<Result<_>>()?,
        _ => Vec::new(),
    };

    let mut methods = Vec::new();
    match (&a.checkpoint, a.generated.is_empty()) {
        (Some(_), false) => return Err(Error::InvalidArgument("use either --checkpoint or --generated, not both".into())),
        (None, true) => return Err(Error::InvalidArgument("nothing to evaluate: pass --generated or --checkpoint".into())),
        (Some(ckpt), true) => {
            let pair = load_denoiser(ckpt)?;
            for mask in &a.masks {
                let mut runs = Vec::new();
                for run in 0..a.runs {
                    let imgs = sample_records(&pair, &records, *mask, seed.wrapping_add(run as u64))?;
                    let refs: Vec<&Image> = imgs.iter().collect();
                    runs.push(score_run(&records, &refs, classifier.as_ref(), &stage_models)?);
                }
                methods.push(aggregate(mask.name().to_string(), runs));
            }
        }
        (None, false) => {
            ensure!(a.runs == 1, InvalidArgument, "--runs applies to --checkpoint mode");
            ensure!(
                a.names.is_empty() || a.names.len() == a.generated.len(),
                InvalidArgument,
                "{} names for {} generated directories",
                a.names.len(),
                a.generated.len()
            );
            for (i, dir) in a.generated.iter().enumerate() {
                let images = load_image_dir(dir)?;
                let name = a.names.get(i).cloned().unwrap_or_else(|| default_method_name(dir));
                let generated = pair_with_split(&images, &records, &ds, dir)?;
                methods.push(aggregate(name, vec![score_run(&records, &generated, classifier.as_ref(), &stage_models)?]));
            }
        }
    }
    if methods.len() >= 2 {
        let table: Vec<(String, QualityResult)> = methods
            .iter()
            .map(|m| (m.method.clone(), QualityResult { ssim: m.ssim, psnr_db: m.psnr_db, n_pairs: m.n_pairs }))
            .collect();
        let ranking = quality_rank(&table)?;
        for m in &mut methods {
            m.quality_rank = ranking.get(&m.method).map(|e| e.final_rank);
        }
    }
    write_json(&out.join("metrics.json"), &methods)?;
    write_text(&out.join("metrics.md"), &metrics_markdown(&methods))
}

fn default_method_name(dir: &Path) -> String {
    let base = dir.file_name().and_then(|s| s.to_str()).unwrap_or("generated");
    match (base, dir.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str())) {
        ("IHC", Some(parent)) => format!("{parent}/IHC"),
        _ => base.to_string(),
    }
}

/// Generated images in split order. Every split id needs an image; images
/// for ids outside the dataset are rejected.
fn pair_with_split<'a>(
    images: &'a BTreeMap<String, Image>,
    records: &[&PairedPatch],
    ds: &Dataset,
    dir: &Path,
) -> Result<Vec<&'a Image>> {
    if let Some(extra) = images.keys().find(|id| ds.get(id).is_none()) {
        return Err(Error::Pairing(format!("{}: `{extra}` has no real counterpart", dir.display())));
    }
    records
        .iter()
        .map(|p| {
            let img = images
                .get(&p.id)
                .ok_or_else(|| Error::Pairing(format!("{}: no generated image for `{}`", dir.display(), p.id)))?;
            ensure!(img.dim() == p.ihc.dim(), Pairing, "`{}`: generated {:?} vs real {:?}", p.id, img.dim(), p.ihc.dim());
            Ok(img)
        })
        .collect()
}

fn cmd_perturb(a: &PerturbArgs, seed: u64, out: &Path) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let records = ds.select(a.split);
    let classifier = load_classifier(&a.classifier, a.stage)?;
    let battery = if a.perturbations.is_empty() { standard_battery(seed) } else { a.perturbations.clone() };
    let report = run_battery(&records, &classifier, &battery)?;
    write_json(&out.join("perturbation.json"), &report)?;
    write_text(&out.join("perturbation.md"), &report.to_markdown())
}

fn dataset_mean_color(ds: &Dataset) -> [f32; 3] {
    let mut acc = [0.0f64; 3];
    for p in &ds.patches {
        let m = mean_color(&p.he);
        for c in 0..3 {
            acc[c] += m[c] as f64;
        }
    }
    acc.map(|v| (v / ds.patches.len().max(1) as f64) as f32)
}

fn cmd_saliency(a: &SaliencyArgs, seed: u64, out: &Path) -> Result<()> {
    let pair = load_denoiser(&a.checkpoint)?;
    let ds = a.data.as_deref().map(load_dataset).transpose()?;
    let (cond, footprint, label) = match (a.blob_her2, &ds) {
        (Some(her2), _) => {
            let size = ds.as_ref().and_then(|d| d.patches.first()).map(|p| p.he.dim().1).unwrap_or(32);
            let (patch, fp) = synth_single_blob(size, her2, seed)?;
            (patch.he, Some(fp), patch.id)
        }
        (None, Some(ds)) => {
            let patch = match &a.id {
                Some(id) => ds.get(id).ok_or_else(|| Error::InvalidArgument(format!("no patch `{id}` in dataset")))?,
                None => ds
                    .select(SplitName::Test)
                    .first()
                    .copied()
                    .or(ds.patches.first())
                    .ok_or_else(|| Error::InvalidArgument("dataset is empty".into()))?,
            };
            (patch.he.clone(), None, patch.id.clone())
        }
        (None, None) => return Err(Error::InvalidArgument("pass --data (with optional --id) or --blob-her2".into())),
    };
    let fill = match &ds {
        Some(d) => dataset_mean_color(d),
        None => mean_color(&cond),
    };
    let t_max = pair.schedule.timesteps;
    let timesteps = if a.timesteps.is_empty() { vec![t_max, (t_max / 2).max(1), 1] } else { a.timesteps.clone() };
    let cfg = RiseConfig { timesteps, n_masks: a.n_masks, keep_prob: a.keep_prob, cell: a.cell, seed, fill };
    let map = rise_saliency(&cond, &pair, &cfg)?;
    map.export(out, &cond)?;
    let mut md = format!("# Saliency for `{label}`\n\n{} masks, keep probability {}, {}x{} grid.\n", cfg.n_masks, cfg.keep_prob, cfg.cell, cfg.cell);
    if let Some(fp) = footprint {
        md += "\n| t | mean inside blob | mean outside | ratio |\n|---|---|---|---|\n";
        for (t, m) in map.timesteps.iter().zip(&map.maps) {
            let (i, o) = inside_outside_means(m, &fp);
            md += &format!("| {t} | {i:.4} | {o:.4} | {:.2} |\n", i / o);
        }
    }
    write_text(&out.join("saliency.md"), &md)
}

fn cmd_classifier(a: &ClassifierArgs, seed: u64, out: &Path) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let stage_epochs = match a.stage_epochs.as_slice() {
        [] => None,
        [u, p, o] => Some([*u, *p, *o]),
        other => return Err(Error::InvalidArgument(format!("--stage-epochs needs 3 values, got {}", other.len()))),
    };
    let cfg = ClassifierConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        width: a.width,
        binarize: !a.four_class,
        stage_epochs,
        seed,
    };
    let train_set = ds.select(SplitName::Train);
    let test_set = ds.select(SplitName::Test);
    let run = train_classifier(&train_set, &test_set, &cfg)?;
    for s in &run.stages {
        s.model.save(&out.join(format!("classifier_{}.json", s.info.stage.name())))?;
    }
    write_text(&out.join("curves.csv"), &run.curve_csv())?;
    let infos: Vec<_> = run.stages.iter().map(|s| &s.info).collect();
    write_json(&out.join("stages.json"), &json!({ "stages": infos, "stage_order_ok": run.stage_order_ok }))?;
    let mut md = String::from("| Stage | Epoch | Train acc | Test acc |\n|---|---|---|---|\n");
    for i in infos {
        md += &format!("| {} | {} | {:.4} | {:.4} |\n", i.stage, i.epoch, i.train_acc, i.test_acc);
    }
    write_text(&out.join("stages.md"), &md)
}
