//! Feature files, dataset manifests, source bundles and synthetic domains.
//!
//! Feature files are UTF-8 CSV with a header `f0,...,f{B-1},label` (the
//! label column is omitted for unlabeled files). A manifest is a JSON
//! document naming subjects, sessions, class count, feature width and a
//! `"subject/session" -> relative path` map.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::ndiff::Matrix;

/// One subject/session worth of samples: `W` rows by `B` feature columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Matrix,
    pub labels: Option<Vec<usize>>,
    pub subject_id: String,
    pub session_id: String,
}

impl FeatureMatrix {
    pub fn new(
        values: Matrix,
        labels: Option<Vec<usize>>,
        subject_id: impl Into<String>,
        session_id: impl Into<String>,
    ) -> Result<Self> {
        if let Some((idx, _)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let cols = values.ncols().max(1);
            return Err(Error::NonFinite {
                row: idx / cols,
                col: idx % cols,
            });
        }
        if let Some(l) = &labels {
            if l.len() != values.nrows() {
                return Err(Error::shape(format!(
                    "{} labels for {} rows",
                    l.len(),
                    values.nrows()
                )));
            }
        }
        Ok(Self {
            values,
            labels,
            subject_id: subject_id.into(),
            session_id: session_id.into(),
        })
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::config(format!("{}/{} has no labels", self.subject_id, self.session_id)))
    }

    /// Copy without labels, as handed to training for the target domain.
    pub fn unlabeled(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        self.values.select(Axis(0), idx)
    }

    pub fn check_labels(&self, n_classes: usize) -> Result<()> {
        if let Some(l) = &self.labels {
            if let Some((row, &label)) = l.iter().enumerate().find(|(_, &y)| y >= n_classes) {
                return Err(Error::Label {
                    row,
                    label: label as i64,
                    n_classes,
                });
            }
        }
        Ok(())
    }
}

/// Hash of a row's exact bit pattern, used to audit source/target disjointness.
pub fn row_hash(row: ndarray::ArrayView1<f64>) -> u64 {
    let mut h = DefaultHasher::new();
    for v in row {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

pub fn save_features(path: &Path, fm: &FeatureMatrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let b = fm.feature_dim();
    let mut header: Vec<String> = (0..b).map(|i| format!("f{i}")).collect();
    if fm.labels.is_some() {
        header.push("label".into());
    }
    let csv_err = |e: csv::Error| Error::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    w.write_record(&header).map_err(csv_err)?;
    for (r, row) in fm.values.rows().into_iter().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        if let Some(l) = &fm.labels {
            rec.push(l[r].to_string());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    write_atomic(path, &bytes)
}

/// Reads a feature CSV. `n_classes` bounds the label column when present.
pub fn read_feature_csv(
    path: &Path,
    n_classes: Option<usize>,
    subject_id: &str,
    session_id: &str,
) -> Result<FeatureMatrix> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let parse_err = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        msg,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| parse_err(e.to_string()))?;
    let header = rdr.headers().map_err(|e| parse_err(e.to_string()))?.clone();
    let labeled = header.iter().next_back() == Some("label");
    let b = header.len() - usize::from(labeled);
    for (i, name) in header.iter().take(b).enumerate() {
        if name != format!("f{i}") {
            return Err(parse_err(format!("header column {i} is `{name}`, expected `f{i}`")));
        }
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        if rec.len() != header.len() {
            return Err(Error::shape(format!(
                "{}: row {r} has {} fields, header has {}",
                path.display(),
                rec.len(),
                header.len()
            )));
        }
        for (c, field) in rec.iter().take(b).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("row {r}, column {c}: `{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(Error::NonFinite { row: r, col: c });
            }
            values.push(v);
        }
        if labeled {
            let raw = rec[b].trim();
            let label: i64 = raw
                .parse()
                .map_err(|_| parse_err(format!("row {r}: label `{raw}` is not an integer")))?;
            if label < 0 || n_classes.is_some_and(|m| label as usize >= m) {
                return Err(Error::Label {
                    row: r,
                    label,
                    n_classes: n_classes.unwrap_or(0),
                });
            }
            labels.push(label as usize);
        }
        rows += 1;
    }
    let values = Matrix::from_shape_vec((rows, b), values).map_err(|e| parse_err(e.to_string()))?;
    FeatureMatrix::new(values, labeled.then_some(labels), subject_id, session_id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandDef {
    pub name: String,
    pub low_hz: f64,
    pub high_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub subjects: Vec<String>,
    pub sessions: Vec<String>,
    pub n_classes: usize,
    pub feature_dim: usize,
    pub files: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_counts: Option<BTreeMap<String, usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_rate_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub channels: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bands: Vec<BandDef>,
    /// Directory the relative file paths resolve against; not serialised.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

pub fn file_key(subject: &str, session: &str) -> String {
    format!("{subject}/{session}")
}

impl DatasetManifest {
    pub fn path_for(&self, subject: &str, session: &str) -> Result<PathBuf> {
        let key = file_key(subject, session);
        self.files
            .get(&key)
            .map(|p| self.base_dir.join(p))
            .ok_or_else(|| Error::schema(format!("files.{key}"), "no file for this subject/session"))
    }

    pub fn has(&self, subject: &str, session: &str) -> bool {
        self.files.contains_key(&file_key(subject, session))
    }

    /// Schema checks that need no file access.
    pub fn validate_schema(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::schema("n_classes", "must be positive"));
        }
        if self.feature_dim == 0 {
            return Err(Error::schema("feature_dim", "must be positive"));
        }
        if self.subjects.is_empty() {
            return Err(Error::schema("subjects", "must not be empty"));
        }
        if self.sessions.is_empty() {
            return Err(Error::schema("sessions", "must not be empty"));
        }
        if let Some(rate) = self.sampling_rate_hz {
            if !(rate > 0.0 && rate.is_finite()) {
                return Err(Error::schema("sampling_rate_hz", "must be positive"));
            }
        }
        for key in self.files.keys() {
            let (subj, sess) = key
                .split_once('/')
                .ok_or_else(|| Error::schema(format!("files.{key}"), "key must be `subject/session`"))?;
            if !self.subjects.iter().any(|s| s == subj) {
                return Err(Error::schema(format!("files.{key}"), format!("unknown subject `{subj}`")));
            }
            if !self.sessions.iter().any(|s| s == sess) {
                return Err(Error::schema(format!("files.{key}"), format!("unknown session `{sess}`")));
            }
        }
        if let Some(counts) = &self.sample_counts {
            for (key, &w) in counts {
                if w == 0 {
                    return Err(Error::schema(format!("sample_counts.{key}"), "must be positive"));
                }
                if !self.files.contains_key(key) {
                    return Err(Error::schema(format!("sample_counts.{key}"), "no matching file entry"));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        write_atomic(path, &json)
    }
}

/// Parses and fully validates a manifest, including every referenced file's
/// existence and label range.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let path = if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    };
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut manifest: DatasetManifest = serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate_schema()?;
    for key in manifest.files.keys() {
        let (subj, sess) = key.split_once('/').expect("validated");
        let file = manifest.path_for(subj, sess)?;
        if !file.exists() {
            return Err(Error::MissingFile(file));
        }
        read_feature_csv(&file, Some(manifest.n_classes), subj, sess).map_err(|e| match e {
            Error::Label { .. } | Error::NonFinite { .. } | Error::Shape(_) => {
                Error::schema(format!("files.{key}"), e.to_string())
            }
            other => other,
        })?;
    }
    Ok(manifest)
}

pub fn load_features(manifest: &DatasetManifest, subject: &str, session: &str) -> Result<FeatureMatrix> {
    let path = manifest.path_for(subject, session)?;
    let fm = read_feature_csv(&path, Some(manifest.n_classes), subject, session)?;
    if fm.feature_dim() != manifest.feature_dim {
        return Err(Error::shape(format!(
            "{}: {} feature columns, manifest declares {}",
            path.display(),
            fm.feature_dim(),
            manifest.feature_dim
        )));
    }
    if let Some(&w) = manifest
        .sample_counts
        .as_ref()
        .and_then(|c| c.get(&file_key(subject, session)))
    {
        if fm.rows() != w {
            return Err(Error::shape(format!(
                "{}: {} rows, manifest declares {w}",
                path.display(),
                fm.rows()
            )));
        }
    }
    Ok(fm)
}

/// `N` individual source domains plus their row-wise union.
#[derive(Debug, Clone)]
pub struct SourceBundle {
    pub individual_sources: Vec<FeatureMatrix>,
    pub ensemble: FeatureMatrix,
}

impl SourceBundle {
    pub fn n_sources(&self) -> usize {
        self.individual_sources.len()
    }

    /// Individual sources followed by the ensemble, i.e. one domain per branch.
    pub fn domains(&self) -> impl Iterator<Item = &FeatureMatrix> {
        self.individual_sources.iter().chain(std::iter::once(&self.ensemble))
    }

    pub fn feature_dim(&self) -> usize {
        self.ensemble.feature_dim()
    }
}

pub fn build_source_bundle(sources: Vec<FeatureMatrix>) -> Result<SourceBundle> {
    let first = sources
        .first()
        .ok_or_else(|| Error::config("a source bundle needs at least one source"))?;
    let b = first.feature_dim();
    if let Some(bad) = sources.iter().find(|s| s.feature_dim() != b) {
        return Err(Error::shape(format!(
            "source {}/{} has {} features, expected {b}",
            bad.subject_id,
            bad.session_id,
            bad.feature_dim()
        )));
    }
    let views: Vec<_> = sources.iter().map(|s| s.values.view()).collect();
    let values = concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?;
    let labels = sources
        .iter()
        .map(|s| s.labels.clone())
        .collect::<Option<Vec<_>>>()
        .map(|ls| ls.concat());
    let ensemble = FeatureMatrix {
        values,
        labels,
        subject_id: "ensemble".into(),
        session_id: first.session_id.clone(),
    };
    Ok(SourceBundle {
        individual_sources: sources,
        ensemble,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_sources: usize,
    pub n_classes: usize,
    pub feature_dim: usize,
    pub samples_per_class: usize,
    pub class_separation: f64,
    pub domain_shift_scale: f64,
    pub rng_seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_sources == 0 || self.n_classes == 0 || self.feature_dim == 0 || self.samples_per_class == 0 {
            return Err(Error::config("synthetic spec: counts must be positive"));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return Err(Error::config("synthetic spec: class_separation must be positive"));
        }
        if !(self.domain_shift_scale >= 0.0 && self.domain_shift_scale.is_finite()) {
            return Err(Error::config("synthetic spec: domain_shift_scale must be non-negative"));
        }
        Ok(())
    }
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize, norm: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let len = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.into_iter().map(|x| x * norm / len).collect()
}

/// Class-conditional Gaussian domains sharing class means, each translated by
/// its own random offset of norm `domain_shift_scale`. Subjects are named
/// `S1..S{n_sources}`, the target is `S{n_sources + 1}`; the returned target
/// keeps its labels for scoring only.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(SourceBundle, FeatureMatrix)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let d = spec.feature_dim;
    let means: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| random_direction(&mut rng, d, spec.class_separation))
        .collect();
    let mut domains = Vec::with_capacity(spec.n_sources + 1);
    for k in 0..=spec.n_sources {
        let offset = random_direction(&mut rng, d, spec.domain_shift_scale);
        let n = spec.n_classes * spec.samples_per_class;
        let mut labels: Vec<usize> = (0..n).map(|i| i / spec.samples_per_class).collect();
        labels.shuffle(&mut rng);
        let mut values = Matrix::zeros((n, d));
        for (r, &c) in labels.iter().enumerate() {
            for j in 0..d {
                let noise: f64 = StandardNormal.sample(&mut rng);
                values[[r, j]] = means[c][j] + offset[j] + noise;
            }
        }
        domains.push(FeatureMatrix::new(values, Some(labels), format!("S{}", k + 1), "1")?);
    }
    let target = domains.pop().expect("n_sources + 1 domains");
    Ok((build_source_bundle(domains)?, target))
}

/// Writes a synthetic dataset (all domains, one session) as feature files plus
/// `manifest.json` under `dir`.
pub fn write_synthetic_dataset(spec: &SyntheticSpec, dir: &Path) -> Result<DatasetManifest> {
    let (bundle, target) = generate_synthetic(spec)?;
    let mut files = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let mut subjects = Vec::new();
    for fm in bundle.individual_sources.iter().chain(std::iter::once(&target)) {
        let rel = PathBuf::from(format!("{}_{}.csv", fm.subject_id, fm.session_id));
        save_features(&dir.join(&rel), fm)?;
        let key = file_key(&fm.subject_id, &fm.session_id);
        files.insert(key.clone(), rel);
        counts.insert(key, fm.rows());
        subjects.push(fm.subject_id.clone());
    }
    let manifest = DatasetManifest {
        subjects,
        sessions: vec!["1".into()],
        n_classes: spec.n_classes,
        feature_dim: spec.feature_dim,
        files,
        sample_counts: Some(counts),
        sampling_rate_hz: None,
        channels: Vec::new(),
        bands: Vec::new(),
        base_dir: dir.to_path_buf(),
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}
