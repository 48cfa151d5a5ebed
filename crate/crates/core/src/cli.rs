//! Command-line front end. `run` parses arguments, executes one subcommand
//! and maps failures to exit codes (2 config, 3 data, 4 numeric).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::dataio::{self, load_manifest, DatasetManifest, SyntheticSpec};
use crate::error::{Error, Result};
use crate::evalkit::{self, EvalConfig, Fold, LobeMap, NormSettings};
use crate::features;
use crate::io::write_atomic;
use crate::losses::KernelConfig;
use crate::model::{ModelConfig, MsDcdaModel};
use crate::trainer::{self, LdaMode, LossKind, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "msdcda", version, about = "Multi-source contrastive domain adaptation for EEG emotion recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Band-pass a raw recording, compute windowed DE features and write a feature CSV.
    Extract(ExtractArgs),
    /// Write a synthetic multi-domain dataset with a manifest.
    Synth(SynthArgs),
    /// Train on every other subject of a session and adapt to one target subject.
    Train(TrainCmd),
    /// Leave-one-subject-out evaluation.
    LooSubject(LooArgs),
    /// Leave-one-session-out evaluation.
    LooSession(LooArgs),
    /// CE only, each auxiliary loss removed, and the full objective.
    AblateLosses(AblateArgs),
    /// Static DISC:MMD ratios against the dynamic weighting.
    AblateRatio(AblateRatioArgs),
    /// Brain-lobe channel subsets.
    AblateLobes(AblateLobesArgs),
    /// Train on one dataset and evaluate on another.
    Transfer(TransferArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BnPlacement {
    Both,
    Cfe,
    Mbc,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    Subject,
    Session,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LdaArg {
    Batch,
    Epoch,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Defaults to 32 for three classes and 16 for four or more.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Pseudo-label confidence threshold for SCD.
    #[arg(long, default_value_t = 0.8)]
    pub threshold: f64,
    /// `median`, `median-grad` or `fixed:<sigma>`.
    #[arg(long, default_value = "median")]
    pub kernel: String,
    /// Divide MMD by K-1 and the SCD sum by (K-1)(M+1) instead of taking true means.
    #[arg(long)]
    pub paper_literal: bool,
    /// Comma-separated subset of mmd,scd,disc.
    #[arg(long, value_delimiter = ',')]
    pub disable: Vec<String>,
    #[arg(long, value_enum, default_value = "batch")]
    pub lda: LdaArg,
    #[arg(long, value_enum, default_value = "both")]
    pub bn: BnPlacement,
    /// Normalise each domain batch separately instead of jointly.
    #[arg(long)]
    pub split_bn: bool,
    /// Epoch progress lines on stderr.
    #[arg(long)]
    pub progress: bool,
}

impl TrainArgs {
    fn train_config(&self, n_classes: usize, ratio: Option<&str>) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::for_classes(n_classes);
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        if let Some(b) = self.batch {
            cfg.batch_size = b;
        }
        cfg.rng_seed = self.seed;
        cfg.confidence_threshold = self.threshold;
        cfg.kernel = parse_kernel(&self.kernel)?;
        cfg.paper_literal_constants = self.paper_literal;
        cfg.disabled_losses = self
            .disable
            .iter()
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.parse::<LossKind>())
            .collect::<Result<_>>()?;
        cfg.lda_mode = match self.lda {
            LdaArg::Batch => LdaMode::Batch,
            LdaArg::Epoch => LdaMode::Epoch,
        };
        cfg.progress = self.progress;
        if let Some(r) = ratio {
            match evalkit::parse_ratios(r)?.as_slice() {
                [evalkit::RatioSpec::Static(a, b)] => cfg.static_ratio = Some((*a, *b)),
                [evalkit::RatioSpec::Dynamic] => cfg.static_ratio = None,
                _ => return Err(Error::config("--ratio takes a single a:b value")),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn norm(&self) -> NormSettings {
        let (cfe, branch) = match self.bn {
            BnPlacement::Both => (true, true),
            BnPlacement::Cfe => (true, false),
            BnPlacement::Mbc => (false, true),
            BnPlacement::None => (false, false),
        };
        NormSettings {
            cfe,
            branch,
            joint: !self.split_bn,
        }
    }
}

pub fn parse_kernel(s: &str) -> Result<KernelConfig> {
    let mut k = KernelConfig::default();
    match s.trim() {
        "median" => {}
        "median-grad" => k.bandwidth_grad = true,
        other => {
            let sigma = other
                .strip_prefix("fixed:")
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::config(format!("unknown kernel `{other}` (median, median-grad, fixed:<sigma>)")))?;
            k = KernelConfig::fixed(sigma);
        }
    }
    k.validate()?;
    Ok(k)
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Seeds per fold.
    #[arg(long, default_value_t = 1)]
    pub rounds: usize,
    /// Parallel fold workers.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Manifest file or the directory holding `manifest.json`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Raw signal CSV: one channel per row, no header.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub rate: f64,
    /// Window length in seconds.
    #[arg(long, default_value_t = 1.0)]
    pub window: f64,
    /// Label written for every window.
    #[arg(long)]
    pub label: Option<usize>,
    /// Skip electrode-wise normalisation.
    #[arg(long)]
    pub raw: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    pub sources: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 20)]
    pub dim: usize,
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
    #[arg(long, default_value_t = 3.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 12.0)]
    pub shift: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    #[command(flatten)]
    pub io: DataArgs,
    /// Held-out subject.
    #[arg(long)]
    pub target: String,
    #[arg(long)]
    pub session: Option<String>,
    /// Static DISC:MMD ratio replacing the dynamic weighting.
    #[arg(long)]
    pub ratio: Option<String>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct LooArgs {
    #[command(flatten)]
    pub io: DataArgs,
    /// Session for cross-subject runs; defaults to the first listed.
    #[arg(long)]
    pub session: Option<String>,
    #[arg(long)]
    pub ratio: Option<String>,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub eval: EvalArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub io: DataArgs,
    #[arg(long, value_enum, default_value = "subject")]
    pub protocol: Protocol,
    #[arg(long)]
    pub session: Option<String>,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub eval: EvalArgs,
}

#[derive(Debug, Args)]
pub struct AblateRatioArgs {
    #[command(flatten)]
    pub common: AblateArgs,
    /// Comma-separated `a:b` ratios and/or `dynamic`.
    #[arg(long, alias = "ratio", default_value = evalkit::DEFAULT_RATIOS)]
    pub ratios: String,
}

#[derive(Debug, Args)]
pub struct AblateLobesArgs {
    #[command(flatten)]
    pub common: AblateArgs,
    /// Comma-separated selections; lobes within a selection joined by `+`.
    #[arg(long, default_value = evalkit::DEFAULT_LOBE_SELECTIONS)]
    pub lobes: String,
    /// JSON lobe map; defaults to the 62-channel montage, or an even split
    /// for data without channel names.
    #[arg(long)]
    pub lobe_map: Option<PathBuf>,
    /// Bands per channel; defaults to the manifest's band list or 5.
    #[arg(long)]
    pub bands: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[command(flatten)]
    pub common: AblateArgs,
    /// Dataset providing the target domains.
    #[arg(long)]
    pub test_data: PathBuf,
    /// Old-to-new class mapping applied to the dataset with more classes.
    #[arg(long, default_value = "1,0,0,2")]
    pub map: String,
    #[arg(long)]
    pub ratio: Option<String>,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code. Errors are printed as one line on stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let detail: Vec<&str> = text
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(|l| l.trim().trim_start_matches("error: "))
                .filter(|l| !l.is_empty())
                .collect();
            eprintln!("error kind=config code=2 msg={:?}", detail.join(" "));
            return 2;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error kind={} code={} msg={:?}", e.kind(), e.exit_code(), e.to_string());
            e.exit_code()
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Extract(a) => extract(&a),
        Command::Synth(a) => synth(&a),
        Command::Train(a) => train(&a),
        Command::LooSubject(a) => loo(&a, Protocol::Subject),
        Command::LooSession(a) => loo(&a, Protocol::Session),
        Command::AblateLosses(a) => ablate_losses(&a),
        Command::AblateRatio(a) => ablate_ratio(&a),
        Command::AblateLobes(a) => ablate_lobes(&a),
        Command::Transfer(a) => transfer(&a),
    }
}

fn extract(a: &ExtractArgs) -> Result<()> {
    let signal = features::read_raw_signal(&a.input)?;
    let bands = features::standard_bands();
    let mut fm = features::extract_features(&signal, a.rate, &bands, a.window)?;
    if !a.raw {
        fm = features::normalize_electrodewise(&fm)?;
    }
    if let Some(label) = a.label {
        fm.labels = Some(vec![label; fm.rows()]);
    }
    dataio::save_features(&a.out, &fm)
}

fn synth(a: &SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_sources: a.sources,
        n_classes: a.classes,
        feature_dim: a.dim,
        samples_per_class: a.samples,
        class_separation: a.separation,
        domain_shift_scale: a.shift,
        rng_seed: a.seed,
    };
    spec.validate()?;
    dataio::write_synthetic_dataset(&spec, &a.out).map(|_| ())
}

fn session_or_first(m: &DatasetManifest, s: &Option<String>) -> Result<String> {
    match s {
        Some(s) if m.sessions.contains(s) => Ok(s.clone()),
        Some(s) => Err(Error::config(format!("unknown session `{s}`"))),
        None => m
            .sessions
            .first()
            .cloned()
            .ok_or_else(|| Error::config("manifest lists no sessions")),
    }
}

fn eval_config(train: &TrainArgs, eval: &EvalArgs, n_classes: usize, ratio: Option<&str>) -> Result<EvalConfig> {
    let cfg = EvalConfig {
        train: train.train_config(n_classes, ratio)?,
        rounds: eval.rounds,
        jobs: eval.jobs,
        norm: train.norm(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: &TrainCmd) -> Result<()> {
    a.train.train_config(3, a.ratio.as_deref())?;
    let manifest = load_manifest(&a.io.data)?;
    let cfg = a.train.train_config(manifest.n_classes, a.ratio.as_deref())?;
    let session = session_or_first(&manifest, &a.session)?;
    let folds = evalkit::cross_subject_folds(&manifest, &session)?;
    let fold = folds
        .into_iter()
        .find(|f| f.id == a.target)
        .ok_or_else(|| Error::config(format!("subject `{}` not found in session {session}", a.target)))?;
    evalkit::audit_fold(&fold)?;
    let bundle = dataio::build_source_bundle(fold.sources.clone())?;
    let norm = a.train.norm();
    let model_cfg = ModelConfig {
        cfe_batchnorm: norm.cfe,
        branch_batchnorm: norm.branch,
        joint_batchnorm: norm.joint,
        ..ModelConfig::new(bundle.feature_dim(), bundle.n_sources(), manifest.n_classes)
    };
    let model = MsDcdaModel::new(model_cfg, cfg.rng_seed)?;
    let report = trainer::train(model, &bundle, &fold.target.unlabeled(), &cfg)?;
    report.final_model.save(&a.io.out.join("model.json"))?;
    crate::losses::write_loss_log(&a.io.out.join("loss_log.csv"), &report.loss_log)?;
    let pred = report.final_model.predict(&fold.target.values)?;
    let mut out = String::from("row,pred\n");
    for (i, p) in pred.labels.iter().enumerate() {
        out.push_str(&format!("{i},{p}\n"));
    }
    write_atomic(&a.io.out.join("predictions.csv"), out.as_bytes())?;
    if let Some(truth) = fold.target.labels.as_deref() {
        let conf = evalkit::confusion_matrix(truth, &pred.labels, manifest.n_classes)?;
        let m = evalkit::metrics(&conf)?;
        let json = serde_json::json!({
            "target": fold.id,
            "session": session,
            "iterations": report.iterations,
            "accuracy": m.accuracy,
            "f1_macro": m.f1_macro,
            "kappa": m.kappa,
            "confusion": conf,
        });
        let mut bytes = serde_json::to_vec_pretty(&json).expect("json");
        bytes.push(b'\n');
        write_atomic(&a.io.out.join("metrics.json"), &bytes)?;
    }
    Ok(())
}

fn folds_for(manifest: &DatasetManifest, protocol: Protocol, session: &Option<String>) -> Result<(String, Vec<Fold>)> {
    match protocol {
        Protocol::Subject => {
            let s = session_or_first(manifest, session)?;
            Ok((format!("cross-subject/session-{s}"), evalkit::cross_subject_folds(manifest, &s)?))
        }
        Protocol::Session => Ok(("cross-session".into(), evalkit::cross_session_folds(manifest)?)),
    }
}

fn loo(a: &LooArgs, protocol: Protocol) -> Result<()> {
    eval_config(&a.train, &a.eval, 3, a.ratio.as_deref())?;
    let manifest = load_manifest(&a.io.data)?;
    let cfg = eval_config(&a.train, &a.eval, manifest.n_classes, a.ratio.as_deref())?;
    let (name, folds) = folds_for(&manifest, protocol, &a.session)?;
    let reports = evalkit::run_folds(&folds, manifest.n_classes, &cfg)?;
    let summary = evalkit::summarize(&name, &reports)?;
    evalkit::write_reports(&a.io.out, &summary, &reports)
}

fn ablate_losses(a: &AblateArgs) -> Result<()> {
    eval_config(&a.train, &a.eval, 3, None)?;
    let manifest = load_manifest(&a.io.data)?;
    let cfg = eval_config(&a.train, &a.eval, manifest.n_classes, None)?;
    let (_, folds) = folds_for(&manifest, a.protocol, &a.session)?;
    let report = evalkit::ablate_losses(&folds, manifest.n_classes, &cfg)?;
    if report.scd_ordering_holds == Some(false) {
        eprintln!("warning: removing SCD degraded accuracy less than removing MMD");
    }
    report.write(&a.io.out)
}

fn ablate_ratio(a: &AblateRatioArgs) -> Result<()> {
    let c = &a.common;
    let ratios = evalkit::parse_ratios(&a.ratios)?;
    eval_config(&c.train, &c.eval, 3, None)?;
    let manifest = load_manifest(&c.io.data)?;
    let cfg = eval_config(&c.train, &c.eval, manifest.n_classes, None)?;
    let (_, folds) = folds_for(&manifest, c.protocol, &c.session)?;
    evalkit::ablate_ratio(&folds, manifest.n_classes, &cfg, &ratios)?.write(&c.io.out)
}

fn lobe_map_for(manifest: &DatasetManifest, path: Option<&Path>, n_bands: usize) -> Result<LobeMap> {
    if let Some(p) = path {
        return LobeMap::from_path(p);
    }
    if manifest.channels.is_empty() {
        if !manifest.feature_dim.is_multiple_of(n_bands) {
            return Err(Error::config(format!(
                "{} features are not divisible into {n_bands} bands",
                manifest.feature_dim
            )));
        }
        return LobeMap::synthetic(manifest.feature_dim / n_bands);
    }
    let standard = LobeMap::standard_62();
    let wanted: Vec<String> = manifest.channels.iter().map(|c| c.to_ascii_uppercase()).collect();
    let lobes = standard
        .lobes
        .iter()
        .map(|(k, members)| (k.clone(), members.iter().filter(|m| wanted.contains(m)).cloned().collect::<Vec<_>>()))
        .filter(|(_, m)| !m.is_empty())
        .collect();
    let map = LobeMap { channels: wanted, lobes };
    map.validate()?;
    Ok(map)
}

fn ablate_lobes(a: &AblateLobesArgs) -> Result<()> {
    let c = &a.common;
    eval_config(&c.train, &c.eval, 3, None)?;
    let manifest = load_manifest(&c.io.data)?;
    let n_bands = a.bands.unwrap_or(if manifest.bands.is_empty() { 5 } else { manifest.bands.len() });
    if n_bands == 0 {
        return Err(Error::config("--bands must be positive"));
    }
    let map = lobe_map_for(&manifest, a.lobe_map.as_deref(), n_bands)?;
    let selections: Vec<String> = a
        .lobes
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    for s in &selections {
        map.select(s)?;
    }
    let cfg = eval_config(&c.train, &c.eval, manifest.n_classes, None)?;
    let (_, folds) = folds_for(&manifest, c.protocol, &c.session)?;
    evalkit::ablate_lobes(&folds, manifest.n_classes, &cfg, &map, n_bands, &selections)?.write(&c.io.out)
}

fn transfer(a: &TransferArgs) -> Result<()> {
    let c = &a.common;
    let mapping = evalkit::parse_mapping(&a.map)?;
    eval_config(&c.train, &c.eval, 3, a.ratio.as_deref())?;
    let train_set = load_manifest(&c.io.data)?;
    let test_set = load_manifest(&a.test_data)?;
    let n_classes = train_set.n_classes.min(test_set.n_classes);
    if train_set.n_classes != test_set.n_classes {
        let larger = train_set.n_classes.max(test_set.n_classes);
        if mapping.len() != larger || mapping.iter().max().map(|m| m + 1) != Some(n_classes) {
            return Err(Error::config(format!(
                "--map must send {larger} classes onto {n_classes}, got {mapping:?}"
            )));
        }
    }
    let cfg = eval_config(&c.train, &c.eval, n_classes, a.ratio.as_deref())?;
    let session = match c.protocol {
        Protocol::Subject => Some(session_or_first(&test_set, &c.session)?),
        Protocol::Session => None,
    };
    let folds = evalkit::transfer_folds(&train_set, &test_set, session.as_deref())?;
    let folds = evalkit::harmonise_classes(folds, &mapping, n_classes)?;
    let reports = evalkit::run_folds(&folds, n_classes, &cfg)?;
    let name = match &session {
        Some(s) => format!("transfer/cross-subject/session-{s}"),
        None => "transfer/cross-session".into(),
    };
    let summary = evalkit::summarize(&name, &reports)?;
    evalkit::write_reports(&c.io.out, &summary, &reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::Bandwidth;

    #[test]
    fn kernel_flag_parsing() {
        assert_eq!(parse_kernel("median").unwrap(), KernelConfig::default());
        assert!(parse_kernel("median-grad").unwrap().bandwidth_grad);
        assert_eq!(parse_kernel("fixed:2").unwrap().bandwidth, Bandwidth::Fixed(2.0));
        assert!(parse_kernel("fixed:-1").is_err());
        assert!(parse_kernel("rbf").is_err());
    }

    #[test]
    fn unknown_flag_exits_with_config_code() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let code = run(["msdcda", "synth", "--out", out.to_str().unwrap(), "--bogus"]);
        assert_eq!(code, 2);
        assert!(!out.exists());
    }

    #[test]
    fn bad_disable_value_is_config_error() {
        let code = run(["msdcda", "loo-subject", "--data", "nowhere", "--out", "x", "--disable", "ce"]);
        assert_eq!(code, 2);
    }

    #[test]
    fn missing_manifest_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let code = run([
            "msdcda",
            "loo-subject",
            "--data",
            dir.path().join("none").to_str().unwrap(),
            "--out",
            dir.path().join("o").to_str().unwrap(),
        ]);
        assert_eq!(code, 3);
    }
}
