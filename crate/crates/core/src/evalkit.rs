//! Leave-one-out experiments, metrics, ablations and report files.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{concatenate, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{self, build_source_bundle, row_hash, DatasetManifest, FeatureMatrix};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{ModelConfig, MsDcdaModel};
use crate::trainer::{self, LossKind, TrainConfig};

/// SEED-IV {neutral, sad, fear, happy} onto SEED {negative, neutral, positive}.
pub const SEED_IV_TO_SEED: [usize; 4] = [1, 0, 0, 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1_macro: f64,
    pub kappa: f64,
}

/// `conf[true][pred]` counts.
pub fn confusion_matrix(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<Vec<Vec<u64>>> {
    if truth.len() != pred.len() {
        return Err(Error::shape(format!("{} labels vs {} predictions", truth.len(), pred.len())));
    }
    let mut conf = vec![vec![0u64; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= n_classes || p >= n_classes {
            return Err(Error::shape(format!("label pair ({t}, {p}) outside {n_classes} classes")));
        }
        conf[t][p] += 1;
    }
    Ok(conf)
}

pub fn metrics(conf: &[Vec<u64>]) -> Result<Metrics> {
    let m = conf.len();
    if m == 0 || conf.iter().any(|r| r.len() != m) {
        return Err(Error::shape("confusion matrix must be square and non-empty"));
    }
    let total: u64 = conf.iter().flatten().sum();
    if total == 0 {
        return Err(Error::shape("confusion matrix holds no samples"));
    }
    let n = total as f64;
    let diag: u64 = (0..m).map(|c| conf[c][c]).sum();
    let row: Vec<u64> = conf.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<u64> = (0..m).map(|c| conf.iter().map(|r| r[c]).sum()).collect();
    let mut f1_sum = 0.0;
    let mut f1_count = 0usize;
    for c in 0..m {
        if row[c] == 0 && col[c] == 0 {
            continue;
        }
        f1_sum += 2.0 * conf[c][c] as f64 / (row[c] + col[c]) as f64;
        f1_count += 1;
    }
    let p_o = diag as f64 / n;
    let p_e: f64 = (0..m).map(|c| row[c] as f64 * col[c] as f64).sum::<f64>() / (n * n);
    let kappa = if (1.0 - p_e).abs() < 1e-15 { 0.0 } else { (p_o - p_e) / (1.0 - p_e) };
    Ok(Metrics {
        accuracy: p_o,
        f1_macro: f1_sum / f1_count as f64,
        kappa,
    })
}

/// One held-out domain and the sources it is adapted from.
#[derive(Debug, Clone)]
pub struct Fold {
    pub id: String,
    pub sources: Vec<FeatureMatrix>,
    pub target: FeatureMatrix,
}

impl Fold {
    pub fn map(self, f: impl Fn(FeatureMatrix) -> Result<FeatureMatrix>) -> Result<Fold> {
        Ok(Fold {
            id: self.id,
            sources: self.sources.into_iter().map(&f).collect::<Result<_>>()?,
            target: f(self.target)?,
        })
    }

    /// The synthetic task as a single fold: individual sources and the
    /// labelled target.
    pub fn synthetic(spec: &dataio::SyntheticSpec) -> Result<Fold> {
        let (bundle, target) = dataio::generate_synthetic(spec)?;
        Ok(Fold {
            id: target.subject_id.clone(),
            sources: bundle.individual_sources,
            target,
        })
    }
}

/// Fails when any target row also occurs among the source rows.
pub fn audit_fold(fold: &Fold) -> Result<()> {
    let seen: HashSet<u64> = fold
        .sources
        .iter()
        .flat_map(|s| s.values.rows().into_iter().map(row_hash))
        .collect();
    let leaked = fold.target.values.rows().into_iter().filter(|r| seen.contains(&row_hash(*r))).count();
    if leaked > 0 {
        return Err(Error::Leakage(format!("fold {}: {leaked} target rows appear in the sources", fold.id)));
    }
    Ok(())
}

fn concat_domain(parts: &[FeatureMatrix], subject: &str, session: &str) -> Result<FeatureMatrix> {
    let views: Vec<_> = parts.iter().map(|p| p.values.view()).collect();
    let values = concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?;
    let labels = parts
        .iter()
        .map(|p| p.labels.clone())
        .collect::<Option<Vec<_>>>()
        .map(|l| l.concat());
    FeatureMatrix::new(values, labels, subject, session)
}

/// One fold per subject recorded in `session`; the rest are sources.
pub fn cross_subject_folds(manifest: &DatasetManifest, session: &str) -> Result<Vec<Fold>> {
    let subjects: Vec<&String> = manifest.subjects.iter().filter(|s| manifest.has(s, session)).collect();
    if subjects.len() < 2 {
        return Err(Error::config(format!(
            "cross-subject evaluation needs at least 2 subjects in session {session}, found {}",
            subjects.len()
        )));
    }
    let data = subjects
        .iter()
        .map(|s| dataio::load_features(manifest, s, session))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..data.len())
        .map(|t| Fold {
            id: subjects[t].clone(),
            sources: data.iter().enumerate().filter(|&(i, _)| i != t).map(|(_, d)| d.clone()).collect(),
            target: data[t].clone(),
        })
        .collect())
}

/// One domain per session, pooling every subject recorded in it.
pub fn session_domains(manifest: &DatasetManifest) -> Result<Vec<FeatureMatrix>> {
    manifest
        .sessions
        .iter()
        .map(|sess| {
            let parts = manifest
                .subjects
                .iter()
                .filter(|s| manifest.has(s, sess))
                .map(|s| dataio::load_features(manifest, s, sess))
                .collect::<Result<Vec<_>>>()?;
            if parts.is_empty() {
                return Err(Error::config(format!("session {sess} has no files")));
            }
            concat_domain(&parts, "all", sess)
        })
        .collect()
}

/// One fold per session; the remaining sessions are the sources.
pub fn cross_session_folds(manifest: &DatasetManifest) -> Result<Vec<Fold>> {
    if manifest.sessions.len() < 2 {
        return Err(Error::config(format!(
            "cross-session evaluation needs at least 2 sessions, found {}",
            manifest.sessions.len()
        )));
    }
    let domains = session_domains(manifest)?;
    Ok((0..domains.len())
        .map(|t| Fold {
            id: manifest.sessions[t].clone(),
            sources: domains.iter().enumerate().filter(|&(i, _)| i != t).map(|(_, d)| d.clone()).collect(),
            target: domains[t].clone(),
        })
        .collect())
}

/// Batch-norm placement of the evaluated network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormSettings {
    pub cfe: bool,
    pub branch: bool,
    pub joint: bool,
}

impl Default for NormSettings {
    fn default() -> Self {
        Self {
            cfe: true,
            branch: true,
            joint: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub train: TrainConfig,
    /// Seeds per fold; round `r` trains with seed `train.rng_seed + r`.
    pub rounds: usize,
    pub jobs: usize,
    pub norm: NormSettings,
}

impl EvalConfig {
    pub fn new(train: TrainConfig) -> Self {
        Self {
            train,
            rounds: 1,
            jobs: 1,
            norm: NormSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds must be at least 1"));
        }
        if self.jobs == 0 {
            return Err(Error::config("jobs must be at least 1"));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold_id: String,
    pub round: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub f1_macro: f64,
    pub kappa: f64,
    pub confusion: Vec<Vec<u64>>,
    pub n_target: usize,
    pub iterations: u64,
    pub final_total_loss: f64,
}

/// Trains a fresh model on `fold` and scores it on the target labels.
pub fn run_fold(fold: &Fold, n_classes: usize, cfg: &EvalConfig, round: usize) -> Result<FoldReport> {
    audit_fold(fold)?;
    let truth = fold.target.labels()?.to_vec();
    let seed = cfg.train.rng_seed.wrapping_add(round as u64);
    let bundle = build_source_bundle(fold.sources.clone())?;
    let model_cfg = ModelConfig {
        cfe_batchnorm: cfg.norm.cfe,
        branch_batchnorm: cfg.norm.branch,
        joint_batchnorm: cfg.norm.joint,
        ..ModelConfig::new(bundle.feature_dim(), bundle.n_sources(), n_classes)
    };
    let model = MsDcdaModel::new(model_cfg, seed)?;
    let train_cfg = TrainConfig {
        rng_seed: seed,
        ..cfg.train.clone()
    };
    let report = trainer::train(model, &bundle, &fold.target.unlabeled(), &train_cfg)?;
    let pred = report.final_model.predict(&fold.target.values)?;
    let confusion = confusion_matrix(&truth, &pred.labels, n_classes)?;
    let m = metrics(&confusion)?;
    Ok(FoldReport {
        fold_id: fold.id.clone(),
        round,
        seed,
        accuracy: m.accuracy,
        f1_macro: m.f1_macro,
        kappa: m.kappa,
        confusion,
        n_target: truth.len(),
        iterations: report.iterations,
        final_total_loss: report.loss_log.last().map_or(0.0, |b| b.total),
    })
}

/// Every fold × round, in parallel on `cfg.jobs` workers; results come back
/// ordered by fold, then round.
pub fn run_folds(folds: &[Fold], n_classes: usize, cfg: &EvalConfig) -> Result<Vec<FoldReport>> {
    cfg.validate()?;
    let tasks: Vec<(usize, usize)> = (0..folds.len())
        .flat_map(|f| (0..cfg.rounds).map(move |r| (f, r)))
        .collect();
    if cfg.jobs == 1 {
        return tasks.iter().map(|&(f, r)| run_fold(&folds[f], n_classes, cfg, r)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))?;
    pool.install(|| {
        tasks
            .par_iter()
            .map(|&(f, r)| run_fold(&folds[f], n_classes, cfg, r))
            .collect()
    })
}

pub fn loo_cross_subject(manifest: &DatasetManifest, session: &str, cfg: &EvalConfig) -> Result<Vec<FoldReport>> {
    run_folds(&cross_subject_folds(manifest, session)?, manifest.n_classes, cfg)
}

pub fn loo_cross_session(manifest: &DatasetManifest, cfg: &EvalConfig) -> Result<Vec<FoldReport>> {
    run_folds(&cross_session_folds(manifest)?, manifest.n_classes, cfg)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub fold: String,
    /// Accuracy in the best round.
    pub accuracy: f64,
    /// Accuracy averaged over rounds.
    pub accuracy_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub protocol: String,
    pub n_folds: usize,
    pub rounds: usize,
    /// Over every fold and round.
    pub acc_mean: f64,
    pub acc_std: f64,
    /// The round with the highest fold-mean accuracy, reported as mean ± std
    /// over folds.
    pub best_round: usize,
    pub acc_best_mean: f64,
    pub acc_best_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub kappa_mean: f64,
    pub kappa_std: f64,
    pub per_fold: Vec<FoldRow>,
}

pub fn summarize(protocol: &str, reports: &[FoldReport]) -> Result<Summary> {
    if reports.is_empty() {
        return Err(Error::config("no fold reports to summarise"));
    }
    let mut folds: Vec<String> = Vec::new();
    let mut by_round: BTreeMap<usize, Vec<&FoldReport>> = BTreeMap::new();
    for r in reports {
        if !folds.contains(&r.fold_id) {
            folds.push(r.fold_id.clone());
        }
        by_round.entry(r.round).or_default().push(r);
    }
    let pick = |f: fn(&FoldReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
    let (acc_mean, acc_std) = mean_std(&pick(|r| r.accuracy));
    let (f1_mean, f1_std) = mean_std(&pick(|r| r.f1_macro));
    let (kappa_mean, kappa_std) = mean_std(&pick(|r| r.kappa));
    let mut best_round = 0;
    let mut best = (f64::NEG_INFINITY, 0.0);
    for (&round, rs) in &by_round {
        let accs: Vec<f64> = rs.iter().map(|r| r.accuracy).collect();
        let ms = mean_std(&accs);
        if ms.0 > best.0 {
            best = ms;
            best_round = round;
        }
    }
    let per_fold = folds
        .iter()
        .map(|f| {
            let rs: Vec<&FoldReport> = reports.iter().filter(|r| &r.fold_id == f).collect();
            let accs: Vec<f64> = rs.iter().map(|r| r.accuracy).collect();
            FoldRow {
                fold: f.clone(),
                accuracy: rs.iter().find(|r| r.round == best_round).map_or(f64::NAN, |r| r.accuracy),
                accuracy_mean: mean_std(&accs).0,
            }
        })
        .collect();
    Ok(Summary {
        protocol: protocol.to_string(),
        n_folds: folds.len(),
        rounds: by_round.len(),
        acc_mean,
        acc_std,
        best_round,
        acc_best_mean: best.0,
        acc_best_std: best.1,
        f1_mean,
        f1_std,
        kappa_mean,
        kappa_std,
        per_fold,
    })
}

pub fn folds_csv(reports: &[FoldReport]) -> String {
    let mut out = String::from("fold,round,seed,acc,f1,kappa,n_target\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{:?},{:?},{:?},{}",
            r.fold_id, r.round, r.seed, r.accuracy, r.f1_macro, r.kappa, r.n_target
        );
    }
    out
}

/// Counts block followed by row-normalised percentages.
pub fn confusion_csv(conf: &[Vec<u64>]) -> String {
    let m = conf.len();
    let mut out = String::from("block,true");
    for c in 0..m {
        let _ = write!(out, ",pred_{c}");
    }
    out.push('\n');
    for (t, row) in conf.iter().enumerate() {
        let _ = write!(out, "count,{t}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    for (t, row) in conf.iter().enumerate() {
        let total: u64 = row.iter().sum();
        let _ = write!(out, "percent,{t}");
        for &v in row {
            let pct = if total == 0 { 0.0 } else { 100.0 * v as f64 / total as f64 };
            let _ = write!(out, ",{pct:.2}");
        }
        out.push('\n');
    }
    out
}

/// Bar-chart data: index, fold, best-round accuracy in percent.
pub fn accuracy_dat(summary: &Summary) -> String {
    let mut out = String::from("# index fold accuracy_percent\n");
    for (i, row) in summary.per_fold.iter().enumerate() {
        let _ = writeln!(out, "{i} {} {:.4}", row.fold, 100.0 * row.accuracy);
    }
    out
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(v).expect("report types serialise");
    bytes.push(b'\n');
    bytes
}

/// `summary.json`, `folds.csv`, `accuracy.dat` and one confusion CSV per fold
/// and round under `confusion/`.
pub fn write_reports(dir: &Path, summary: &Summary, reports: &[FoldReport]) -> Result<()> {
    write_atomic(&dir.join("summary.json"), &to_json(summary))?;
    write_atomic(&dir.join("folds.csv"), folds_csv(reports).as_bytes())?;
    write_atomic(&dir.join("accuracy.dat"), accuracy_dat(summary).as_bytes())?;
    for r in reports {
        let name = format!("{}_r{}.csv", sanitize(&r.fold_id), r.round);
        write_atomic(&dir.join("confusion").join(name), confusion_csv(&r.confusion).as_bytes())?;
    }
    Ok(())
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Named channel groups over a montage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LobeMap {
    pub channels: Vec<String>,
    pub lobes: BTreeMap<String, Vec<String>>,
}

const LOBES_62: &str = include_str!("../data/lobes_62.json");

fn lobe_key(name: &str) -> String {
    match name.trim().to_ascii_lowercase().as_str() {
        "f" | "frontal" => "F".into(),
        "o" | "occipital" => "O".into(),
        "p" | "parietal" => "P".into(),
        "t" | "temporal" => "T".into(),
        other => other.to_ascii_uppercase(),
    }
}

impl LobeMap {
    /// The 62-channel montage used by SEED and SEED-IV.
    pub fn standard_62() -> Self {
        let map: LobeMap = serde_json::from_str(LOBES_62).expect("bundled lobe map parses");
        map.validate().expect("bundled lobe map is valid");
        map
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let map: LobeMap = serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        map.validate()?;
        Ok(map)
    }

    /// Channels `ch0..` split into four contiguous groups F, O, P, T, the last
    /// group taking the remainder.
    pub fn synthetic(n_channels: usize) -> Result<Self> {
        if n_channels < 4 {
            return Err(Error::config("a synthetic lobe map needs at least 4 channels"));
        }
        let channels: Vec<String> = (0..n_channels).map(|c| format!("ch{c}")).collect();
        let per = n_channels / 4;
        let mut lobes = BTreeMap::new();
        for (k, name) in ["F", "O", "P", "T"].iter().enumerate() {
            let end = if k == 3 { n_channels } else { (k + 1) * per };
            lobes.insert(name.to_string(), channels[k * per..end].to_vec());
        }
        Ok(Self { channels, lobes })
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (lobe, members) in &self.lobes {
            if members.is_empty() {
                return Err(Error::schema(format!("lobes.{lobe}"), "empty lobe"));
            }
            for ch in members {
                if !self.channels.contains(ch) {
                    return Err(Error::schema(format!("lobes.{lobe}"), format!("unknown channel {ch}")));
                }
                if !seen.insert(ch) {
                    return Err(Error::schema(format!("lobes.{lobe}"), format!("channel {ch} in two lobes")));
                }
            }
        }
        Ok(())
    }

    /// Sorted channel indices for a selection such as `F+P`, `frontal,parietal`
    /// or `all`.
    pub fn select(&self, selection: &str) -> Result<Vec<usize>> {
        let names: Vec<String> = if selection.trim().eq_ignore_ascii_case("all") {
            self.lobes.keys().cloned().collect()
        } else {
            selection
                .split(['+', ','])
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(lobe_key)
                .collect()
        };
        if names.is_empty() {
            return Err(Error::config("empty lobe selection"));
        }
        let mut idx = Vec::new();
        for name in &names {
            let members = self
                .lobes
                .get(name)
                .ok_or_else(|| Error::config(format!("unknown lobe `{name}`")))?;
            for ch in members {
                let i = self.channels.iter().position(|c| c == ch).expect("validated");
                if !idx.contains(&i) {
                    idx.push(i);
                }
            }
        }
        idx.sort_unstable();
        Ok(idx)
    }
}

/// Keeps the columns of `channels` in every band of a band-major layout.
pub fn lobe_subset(fm: &FeatureMatrix, channels: &[usize], n_channels: usize, n_bands: usize) -> Result<FeatureMatrix> {
    if channels.is_empty() {
        return Err(Error::config("empty channel selection"));
    }
    if fm.feature_dim() != n_channels * n_bands {
        return Err(Error::shape(format!(
            "{} columns do not match {n_channels} channels x {n_bands} bands",
            fm.feature_dim()
        )));
    }
    if let Some(&bad) = channels.iter().find(|&&c| c >= n_channels) {
        return Err(Error::config(format!("channel index {bad} >= {n_channels}")));
    }
    let cols: Vec<usize> = (0..n_bands)
        .flat_map(|b| channels.iter().map(move |&c| b * n_channels + c))
        .collect();
    FeatureMatrix::new(
        fm.values.select(Axis(1), &cols),
        fm.labels.clone(),
        fm.subject_id.clone(),
        fm.session_id.clone(),
    )
}

/// Relabels through `mapping` (old class → new class); the mapping must hit
/// every class in `0..n_new` and cover every present label.
pub fn merge_classes(fm: &FeatureMatrix, mapping: &[usize]) -> Result<FeatureMatrix> {
    let n_new = mapping.iter().max().map_or(0, |m| m + 1);
    if (0..n_new).any(|c| !mapping.contains(&c)) {
        return Err(Error::config(format!("class mapping {mapping:?} leaves a gap in 0..{n_new}")));
    }
    let labels = fm.labels()?;
    let merged = labels
        .iter()
        .enumerate()
        .map(|(row, &y)| {
            mapping.get(y).copied().ok_or(Error::Label {
                row,
                label: y as i64,
                n_classes: mapping.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureMatrix::new(fm.values.clone(), Some(merged), fm.subject_id.clone(), fm.session_id.clone())
}

pub fn parse_mapping(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("bad class mapping entry `{p}`")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub study: String,
    pub rows: Vec<AblationRow>,
    /// Loss study only: whether dropping SCD costs at least as much accuracy
    /// as dropping MMD.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scd_ordering_holds: Option<bool>,
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn table_csv(&self) -> String {
        let mut out = String::from("label,acc_mean,acc_std,acc_best_mean,acc_best_std,f1_mean,kappa_mean\n");
        for r in &self.rows {
            let s = &r.summary;
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.label, s.acc_mean, s.acc_std, s.acc_best_mean, s.acc_best_std, s.f1_mean, s.kappa_mean
            );
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(format!("ablation_{}.json", self.study)), &to_json(self))?;
        write_atomic(&dir.join(format!("ablation_{}.csv", self.study)), self.table_csv().as_bytes())
    }
}

fn ablate(
    study: &str,
    folds: &[Fold],
    n_classes: usize,
    variants: Vec<(String, EvalConfig)>,
) -> Result<AblationReport> {
    let rows = variants
        .into_iter()
        .map(|(label, cfg)| {
            let reports = run_folds(folds, n_classes, &cfg)?;
            Ok(AblationRow {
                summary: summarize(study, &reports)?,
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        study: study.to_string(),
        rows,
        scd_ordering_holds: None,
    })
}

pub const LOSS_ABLATION_LABELS: [&str; 5] = ["CE only", "w/o MMD", "w/o DISC", "w/o SCD", "ALL"];

/// CE only, each auxiliary loss removed in turn, and the full objective.
pub fn ablate_losses(folds: &[Fold], n_classes: usize, cfg: &EvalConfig) -> Result<AblationReport> {
    let disabled: [&[LossKind]; 5] = [&LossKind::ALL, &[LossKind::Mmd], &[LossKind::Disc], &[LossKind::Scd], &[]];
    let variants = LOSS_ABLATION_LABELS
        .iter()
        .zip(disabled)
        .map(|(label, off)| {
            let mut c = cfg.clone();
            c.train.disabled_losses = off.iter().copied().collect();
            (label.to_string(), c)
        })
        .collect();
    let mut report = ablate("losses", folds, n_classes, variants)?;
    let acc = |l: &str| report.row(l).map(|r| r.summary.acc_mean);
    report.scd_ordering_holds = match (acc("w/o SCD"), acc("w/o MMD")) {
        (Some(no_scd), Some(no_mmd)) => Some(no_scd <= no_mmd),
        _ => None,
    };
    Ok(report)
}

/// A `DISC : MMD` weighting for the ratio study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RatioSpec {
    Static(f64, f64),
    Dynamic,
}

impl RatioSpec {
    pub fn label(&self) -> String {
        match self {
            RatioSpec::Static(a, b) => format!("{a}:{b}"),
            RatioSpec::Dynamic => "dynamic".into(),
        }
    }
}

pub fn parse_ratios(s: &str) -> Result<Vec<RatioSpec>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            if p.eq_ignore_ascii_case("dynamic") || p.eq_ignore_ascii_case("tau") {
                return Ok(RatioSpec::Dynamic);
            }
            let (a, b) = p
                .split_once(':')
                .ok_or_else(|| Error::config(format!("ratio `{p}` is not of the form a:b")))?;
            let parse = |x: &str| {
                x.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| *v >= 0.0 && v.is_finite())
                    .ok_or_else(|| Error::config(format!("bad ratio part `{x}`")))
            };
            let (a, b) = (parse(a)?, parse(b)?);
            if a + b <= 0.0 {
                return Err(Error::config(format!("ratio `{p}` sums to zero")));
            }
            Ok(RatioSpec::Static(a, b))
        })
        .collect()
}

pub const DEFAULT_RATIOS: &str = "1:9,3:7,1:1,7:3,9:1,dynamic";

pub fn ablate_ratio(folds: &[Fold], n_classes: usize, cfg: &EvalConfig, ratios: &[RatioSpec]) -> Result<AblationReport> {
    if ratios.is_empty() {
        return Err(Error::config("no ratios given"));
    }
    let variants = ratios
        .iter()
        .map(|r| {
            let mut c = cfg.clone();
            c.train.static_ratio = match *r {
                RatioSpec::Static(a, b) => Some((a, b)),
                RatioSpec::Dynamic => None,
            };
            (r.label(), c)
        })
        .collect();
    ablate("ratio", folds, n_classes, variants)
}

pub const DEFAULT_LOBE_SELECTIONS: &str = "F,O,P,T,F+P,O+T,F+P+O,F+P+T,all";

/// One row per lobe selection; `selections` entries are separated by `,`
/// and lobes within an entry by `+`.
pub fn ablate_lobes(
    folds: &[Fold],
    n_classes: usize,
    cfg: &EvalConfig,
    map: &LobeMap,
    n_bands: usize,
    selections: &[String],
) -> Result<AblationReport> {
    let n_channels = map.channels.len();
    let mut rows = Vec::with_capacity(selections.len());
    for sel in selections {
        let idx = map.select(sel)?;
        let subset: Vec<Fold> = folds
            .iter()
            .cloned()
            .map(|f| f.map(|fm| lobe_subset(&fm, &idx, n_channels, n_bands)))
            .collect::<Result<_>>()?;
        let reports = run_folds(&subset, n_classes, cfg)?;
        rows.push(AblationRow {
            label: sel.clone(),
            summary: summarize("lobes", &reports)?,
        });
    }
    Ok(AblationReport {
        study: "lobes".into(),
        rows,
        scd_ordering_holds: None,
    })
}

/// Cross-dataset folds: the sources come from `train_set`, the target from
/// `test_set`. Cross-subject folds hold out each test subject of `session`
/// and drop the same subject from the sources; cross-session folds hold out
/// each test session and use the other sessions of the training set.
pub fn transfer_folds(
    train_set: &DatasetManifest,
    test_set: &DatasetManifest,
    session: Option<&str>,
) -> Result<Vec<Fold>> {
    if train_set.feature_dim != test_set.feature_dim {
        return Err(Error::shape(format!(
            "feature widths differ: {} vs {}",
            train_set.feature_dim, test_set.feature_dim
        )));
    }
    let mut folds = Vec::new();
    match session {
        Some(sess) => {
            for subj in test_set.subjects.iter().filter(|s| test_set.has(s, sess)) {
                let sources = train_set
                    .subjects
                    .iter()
                    .filter(|s| *s != subj && train_set.has(s, sess))
                    .map(|s| dataio::load_features(train_set, s, sess))
                    .collect::<Result<Vec<_>>>()?;
                folds.push(Fold {
                    id: subj.clone(),
                    sources,
                    target: dataio::load_features(test_set, subj, sess)?,
                });
            }
        }
        None => {
            let train_domains = session_domains(train_set)?;
            let test_domains = session_domains(test_set)?;
            for (sess, target) in test_set.sessions.iter().zip(test_domains) {
                let sources: Vec<FeatureMatrix> = train_set
                    .sessions
                    .iter()
                    .zip(&train_domains)
                    .filter(|(s, _)| *s != sess)
                    .map(|(_, d)| d.clone())
                    .collect();
                folds.push(Fold {
                    id: sess.clone(),
                    sources,
                    target,
                });
            }
        }
    }
    if let Some(f) = folds.iter().find(|f| f.sources.is_empty()) {
        return Err(Error::config(format!("transfer fold {} has no sources", f.id)));
    }
    if folds.is_empty() {
        return Err(Error::config("transfer produced no folds"));
    }
    Ok(folds)
}

/// Brings both datasets to a common class set: a dataset with more classes
/// than `n_classes` is relabelled through `mapping`.
pub fn harmonise_classes(folds: Vec<Fold>, mapping: &[usize], n_classes: usize) -> Result<Vec<Fold>> {
    folds
        .into_iter()
        .map(|f| {
            f.map(|fm| {
                let labels = fm.labels()?;
                if labels.iter().any(|&y| y >= n_classes) {
                    merge_classes(&fm, mapping)
                } else {
                    Ok(fm)
                }
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{write_synthetic_dataset, SyntheticSpec};
    use crate::ndiff::Matrix;

    #[test]
    fn two_by_two_hand_example() {
        let m = metrics(&[vec![40, 10], vec![20, 30]]).unwrap();
        assert!((m.accuracy - 0.7).abs() < 1e-12);
        let f1 = (80.0 / 110.0 + 60.0 / 90.0) / 2.0;
        assert!((m.f1_macro - f1).abs() < 1e-12);
        assert!((m.f1_macro - 0.6970).abs() < 1e-4);
        assert!((m.kappa - 0.4).abs() < 1e-12);
    }

    #[test]
    fn diagonal_is_perfect() {
        let m = metrics(&[vec![5, 0, 0], vec![0, 3, 0], vec![0, 0, 9]]).unwrap();
        assert_eq!((m.accuracy, m.f1_macro, m.kappa), (1.0, 1.0, 1.0));
    }

    #[test]
    fn single_class_kappa_is_zero_and_absent_class_is_skipped() {
        let m = metrics(&[vec![4, 0], vec![0, 0]]).unwrap();
        assert_eq!((m.accuracy, m.f1_macro, m.kappa), (1.0, 1.0, 0.0));
        assert!(metrics(&[vec![0, 0], vec![0, 0]]).is_err());
        assert!(metrics(&[]).is_err());
    }

    #[test]
    fn population_std() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }

    #[test]
    fn lobe_map_sizes() {
        let map = LobeMap::standard_62();
        assert_eq!(map.channels.len(), 62);
        let sizes: Vec<usize> = ["F", "O", "P", "T"].iter().map(|l| map.lobes[*l].len()).collect();
        assert_eq!(sizes, vec![21, 12, 23, 6]);
        assert_eq!(map.select("all").unwrap(), (0..62).collect::<Vec<_>>());
        assert_eq!(map.select("frontal+P").unwrap().len(), 44);
        assert!(map.select("X").is_err());
        assert!(map.select("").is_err());
    }

    #[test]
    fn lobe_subset_keeps_band_major_columns() {
        let values = Matrix::from_shape_fn((2, 12), |(r, c)| (r * 100 + c) as f64);
        let fm = FeatureMatrix::new(values, Some(vec![0, 1]), "s", "1").unwrap();
        let sub = lobe_subset(&fm, &[0, 3], 4, 3).unwrap();
        assert_eq!(sub.values.row(0).to_vec(), vec![0.0, 3.0, 4.0, 7.0, 8.0, 11.0]);
        assert!(lobe_subset(&fm, &[], 4, 3).is_err());
        assert!(lobe_subset(&fm, &[0], 5, 3).is_err());
    }

    #[test]
    fn merge_seed_iv() {
        let fm = FeatureMatrix::new(Matrix::zeros((5, 1)), Some(vec![0, 1, 2, 3, 3]), "s", "1").unwrap();
        let merged = merge_classes(&fm, &SEED_IV_TO_SEED).unwrap();
        assert_eq!(merged.labels.unwrap(), vec![1, 0, 0, 2, 2]);
        assert!(merge_classes(&fm, &[0, 2, 2, 2]).is_err());
        assert_eq!(merge_classes(&fm, &[0, 1, 2, 3]).unwrap().labels, fm.labels);
    }

    #[test]
    fn ratio_parsing() {
        let r = parse_ratios(DEFAULT_RATIOS).unwrap();
        assert_eq!(r.len(), 6);
        assert_eq!(r[0], RatioSpec::Static(1.0, 9.0));
        assert_eq!(r[5], RatioSpec::Dynamic);
        assert!(parse_ratios("1-9").is_err());
        assert!(parse_ratios("0:0").is_err());
    }

    #[test]
    fn audit_catches_leakage() {
        let a = FeatureMatrix::new(ndarray::array![[1.0, 2.0], [3.0, 4.0]], Some(vec![0, 1]), "a", "1").unwrap();
        let b = FeatureMatrix::new(ndarray::array![[3.0, 4.0], [5.0, 6.0]], Some(vec![0, 1]), "b", "1").unwrap();
        let fold = Fold {
            id: "b".into(),
            sources: vec![a],
            target: b,
        };
        assert_eq!(audit_fold(&fold).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn folds_partition_subjects() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            n_sources: 3,
            n_classes: 3,
            feature_dim: 4,
            samples_per_class: 4,
            class_separation: 2.0,
            domain_shift_scale: 1.0,
            rng_seed: 2,
        };
        let manifest = write_synthetic_dataset(&spec, dir.path()).unwrap();
        let folds = cross_subject_folds(&manifest, "1").unwrap();
        assert_eq!(folds.len(), 4);
        for f in &folds {
            assert_eq!(f.sources.len(), 3);
            assert!(f.sources.iter().all(|s| s.subject_id != f.target.subject_id));
            audit_fold(f).unwrap();
        }
        assert!(cross_session_folds(&manifest).is_err());
    }
}
