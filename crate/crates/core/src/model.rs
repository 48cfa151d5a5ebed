//! The three-part network: a shared common feature extractor, one
//! contrastive branch per source domain (plus one for the source ensemble),
//! and one classifier head per branch.

use std::path::Path;

use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndiff::{
    AffineLayer, BatchNormLayer, Checkpoint, Graph, Matrix, Mode, NamedArray, ParamStore, Var,
    LEAKY_SLOPE,
};

pub const DEFAULT_INPUT_DIM: usize = 310;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Number of branches, i.e. individual sources + 1.
    pub n_branches: usize,
    pub n_classes: usize,
    /// Output widths of the extractor blocks after the first; the first block
    /// keeps the input width.
    pub cfe_widths: Vec<usize>,
    pub branch_width: usize,
    pub head_hidden: usize,
    pub cfe_batchnorm: bool,
    pub branch_batchnorm: bool,
    /// Normalise all domains of an iteration together instead of one
    /// domain batch at a time.
    #[serde(default)]
    pub joint_batchnorm: bool,
}

impl ModelConfig {
    pub fn new(input_dim: usize, n_sources: usize, n_classes: usize) -> Self {
        Self {
            input_dim,
            n_branches: n_sources + 1,
            n_classes,
            cfe_widths: vec![256, 128],
            branch_width: 64,
            head_hidden: 32,
            cfe_batchnorm: true,
            branch_batchnorm: true,
            joint_batchnorm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.n_classes == 0 || self.branch_width == 0 || self.head_hidden == 0 {
            return Err(Error::config("model widths must be positive"));
        }
        if self.n_branches < 2 {
            return Err(Error::config("need at least one source plus the ensemble branch"));
        }
        if self.cfe_widths.contains(&0) {
            return Err(Error::config("extractor widths must be positive"));
        }
        Ok(())
    }
}

/// Affine → optional batch norm → leaky ReLU.
#[derive(Debug, Clone)]
struct Block {
    affine: AffineLayer,
    norm: Option<BatchNormLayer>,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, i: usize, o: usize, bn: bool, rng: &mut ChaCha8Rng) -> Self {
        let affine = AffineLayer::new(store, &format!("{name}.linear"), i, o, rng);
        let norm = bn.then(|| BatchNormLayer::new(store, &format!("{name}.bn"), o));
        Self { affine, norm }
    }

    fn forward(&mut self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let mut h = self.affine.forward(g, store, x)?;
        if let Some(bn) = &mut self.norm {
            h = bn.forward(g, store, h, mode)?;
        }
        Ok(g.leaky_relu(h, LEAKY_SLOPE))
    }

    fn forward_eval(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = self.affine.forward(g, store, x)?;
        if let Some(bn) = &self.norm {
            h = bn.forward_eval(g, store, h)?;
        }
        Ok(g.leaky_relu(h, LEAKY_SLOPE))
    }
}

#[derive(Debug, Clone)]
struct Head {
    hidden: AffineLayer,
    out: AffineLayer,
}

impl Head {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, store, x)?;
        let logits = self.out.forward(g, store, h)?;
        Ok(g.softmax(logits))
    }
}

/// Graph handles produced by one training forward pass; every list has one
/// entry per branch.
#[derive(Debug, Clone)]
pub struct BranchOutputs {
    pub common_source: Vec<Var>,
    pub common_target: Var,
    pub branch_source: Vec<Var>,
    pub branch_target: Vec<Var>,
    pub probs_source: Vec<Var>,
    pub probs_target: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub per_branch_probs: Vec<Matrix>,
    pub mean_probs: Matrix,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct MsDcdaModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    cfe: Vec<Block>,
    branches: Vec<Block>,
    heads: Vec<Head>,
    mode: Mode,
}

impl MsDcdaModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut cfe = Vec::new();
        let mut width = config.input_dim;
        for (k, &out) in std::iter::once(&config.input_dim).chain(&config.cfe_widths).enumerate() {
            cfe.push(Block::new(&mut store, &format!("cfe.{k}"), width, out, config.cfe_batchnorm, &mut rng));
            width = out;
        }
        let mut branches = Vec::new();
        let mut heads = Vec::new();
        for i in 0..config.n_branches {
            branches.push(Block::new(
                &mut store,
                &format!("mbc.{i}"),
                width,
                config.branch_width,
                config.branch_batchnorm,
                &mut rng,
            ));
            heads.push(Head {
                hidden: AffineLayer::new(&mut store, &format!("mbdc.{i}.hidden"), config.branch_width, config.head_hidden, &mut rng),
                out: AffineLayer::new(&mut store, &format!("mbdc.{i}.out"), config.head_hidden, config.n_classes, &mut rng),
            });
        }
        Ok(Self {
            config,
            store,
            cfe,
            branches,
            heads,
            mode: Mode::Train,
        })
    }

    pub fn n_branches(&self) -> usize {
        self.config.n_branches
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    fn check_width(&self, m: &Matrix) -> Result<()> {
        if m.ncols() != self.config.input_dim {
            return Err(Error::shape(format!(
                "batch has {} features, model expects {}",
                m.ncols(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    fn cfe_forward(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let mode = self.mode;
        let mut h = x;
        for block in &mut self.cfe {
            h = block.forward(g, &self.store, h, mode)?;
        }
        Ok(h)
    }

    /// Source batch `i` goes through the extractor and branch/head `i`; the
    /// target batch goes through the extractor once and then every branch.
    pub fn forward(&mut self, g: &mut Graph, source_batches: &[Matrix], target_batch: &Matrix) -> Result<BranchOutputs> {
        if source_batches.len() != self.n_branches() {
            return Err(Error::shape(format!(
                "{} source batches for {} branches",
                source_batches.len(),
                self.n_branches()
            )));
        }
        for b in source_batches.iter().chain(std::iter::once(target_batch)) {
            self.check_width(b)?;
        }
        let mode = self.mode;
        let mut out = BranchOutputs {
            common_source: Vec::new(),
            common_target: Var::default(),
            branch_source: Vec::new(),
            branch_target: Vec::new(),
            probs_source: Vec::new(),
            probs_target: Vec::new(),
        };
        if self.config.joint_batchnorm {
            let inputs: Vec<Var> = source_batches
                .iter()
                .chain(std::iter::once(target_batch))
                .map(|b| g.constant(b.clone()))
                .collect();
            let stacked = g.concat_rows(&inputs)?;
            let common = self.cfe_forward(g, stacked)?;
            let mut start = 0;
            for b in source_batches {
                out.common_source.push(g.slice_rows(common, start, start + b.nrows())?);
                start += b.nrows();
            }
            out.common_target = g.slice_rows(common, start, start + target_batch.nrows())?;
            for (i, batch) in source_batches.iter().enumerate() {
                let pair = g.concat_rows(&[out.common_source[i], out.common_target])?;
                let f = self.branches[i].forward(g, &self.store, pair, mode)?;
                let ns = batch.nrows();
                let fsd = g.slice_rows(f, 0, ns)?;
                let ftd = g.slice_rows(f, ns, ns + target_batch.nrows())?;
                self.push_heads(g, i, fsd, ftd, &mut out)?;
            }
            return Ok(out);
        }
        let xt = g.constant(target_batch.clone());
        out.common_target = self.cfe_forward(g, xt)?;
        for (i, batch) in source_batches.iter().enumerate() {
            let xs = g.constant(batch.clone());
            let fs = self.cfe_forward(g, xs)?;
            let fsd = self.branches[i].forward(g, &self.store, fs, mode)?;
            let ftd = self.branches[i].forward(g, &self.store, out.common_target, mode)?;
            out.common_source.push(fs);
            self.push_heads(g, i, fsd, ftd, &mut out)?;
        }
        Ok(out)
    }

    fn push_heads(&self, g: &mut Graph, i: usize, fsd: Var, ftd: Var, out: &mut BranchOutputs) -> Result<()> {
        let ps = self.heads[i].forward(g, &self.store, fsd)?;
        let pt = self.heads[i].forward(g, &self.store, ftd)?;
        out.branch_source.push(fsd);
        out.branch_target.push(ftd);
        out.probs_source.push(ps);
        out.probs_target.push(pt);
        Ok(())
    }

    /// Per-branch class probabilities for `x`, always using running
    /// batch-norm statistics.
    pub fn branch_probs(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        self.check_width(x)?;
        let mut g = Graph::new();
        let mut h = g.constant(x.clone());
        for block in &self.cfe {
            h = block.forward_eval(&mut g, &self.store, h)?;
        }
        let mut probs = Vec::with_capacity(self.n_branches());
        for (branch, head) in self.branches.iter().zip(&self.heads) {
            let f = branch.forward_eval(&mut g, &self.store, h)?;
            let p = head.forward(&mut g, &self.store, f)?;
            probs.push(g.value(p).clone());
        }
        Ok(probs)
    }

    pub fn predict(&self, target: &Matrix) -> Result<Prediction> {
        let per_branch = self.branch_probs(target)?;
        Ok(average_prediction(per_branch))
    }

    fn batchnorms(&self) -> impl Iterator<Item = &BatchNormLayer> {
        self.cfe
            .iter()
            .chain(&self.branches)
            .filter_map(|b| b.norm.as_ref())
    }

    fn batchnorms_mut(&mut self) -> impl Iterator<Item = &mut BatchNormLayer> {
        self.cfe
            .iter_mut()
            .chain(&mut self.branches)
            .filter_map(|b| b.norm.as_mut())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::to_value(&self.config).expect("config serialises");
        let mut buffers = Vec::new();
        for bn in self.batchnorms() {
            buffers.push(NamedArray::from_slice(
                &format!("{}.running_mean", bn.name),
                bn.running_mean.as_slice().expect("contiguous"),
            ));
            buffers.push(NamedArray::from_slice(
                &format!("{}.running_var", bn.name),
                bn.running_var.as_slice().expect("contiguous"),
            ));
        }
        Checkpoint::from_store(&self.store, meta, buffers)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(ck.meta.clone())
            .map_err(|e| Error::schema("meta", e.to_string()))?;
        let mut model = Self::new(config, 0)?;
        ck.restore_params(&mut model.store)?;
        for bn in model.batchnorms_mut() {
            for (suffix, target) in [("running_mean", &mut bn.running_mean), ("running_var", &mut bn.running_var)] {
                let arr = ck.buffer(&format!("{}.{suffix}", bn.name))?;
                if arr.values.len() != target.len() {
                    return Err(Error::shape(format!("{}: wrong length", arr.name)));
                }
                target.assign(&ndarray::Array1::from(arr.values.clone()));
            }
        }
        model.mode = Mode::Eval;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    m.axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Arithmetic mean over branches, then argmax.
pub fn average_prediction(per_branch_probs: Vec<Matrix>) -> Prediction {
    let k = per_branch_probs.len() as f64;
    let mut mean = Matrix::zeros(per_branch_probs[0].raw_dim());
    for p in &per_branch_probs {
        mean += p;
    }
    mean /= k;
    let labels = argmax_rows(&mean);
    Prediction {
        per_branch_probs,
        mean_probs: mean,
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    fn batch(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn forward_shapes_for_fourteen_sources() {
        let mut model = MsDcdaModel::new(ModelConfig::new(12, 14, 3), 1).unwrap();
        let sources: Vec<_> = (0..15).map(|i| batch(32, 12, i)).collect();
        let mut g = Graph::new();
        let out = model.forward(&mut g, &sources, &batch(32, 12, 99)).unwrap();
        assert_eq!(out.probs_source.len(), 15);
        assert_eq!(out.probs_target.len(), 15);
        for &p in out.probs_source.iter().chain(&out.probs_target) {
            assert_eq!(g.value(p).dim(), (32, 3));
            for row in g.value(p).rows() {
                assert!((row.sum() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn branch_count_mismatch_is_rejected() {
        let mut model = MsDcdaModel::new(ModelConfig::new(4, 2, 3), 1).unwrap();
        let mut g = Graph::new();
        let sources = vec![batch(4, 4, 1), batch(4, 4, 2)];
        assert!(model.forward(&mut g, &sources, &batch(4, 4, 3)).is_err());
        let sources = vec![batch(4, 4, 1), batch(4, 4, 2), batch(4, 5, 3)];
        assert!(model.forward(&mut g, &sources, &batch(4, 4, 3)).is_err());
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let model = MsDcdaModel::new(ModelConfig::new(6, 2, 3), 4).unwrap();
        let x = batch(9, 6, 5);
        let a = model.predict(&x).unwrap();
        let b = model.predict(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tie_breaks_to_lowest_class() {
        let p = average_prediction(vec![array![[1.0, 0.0, 0.0]], array![[0.0, 1.0, 0.0]]]);
        assert_eq!(p.mean_probs, array![[0.5, 0.5, 0.0]]);
        assert_eq!(p.labels, vec![0]);
        let agree = average_prediction(vec![array![[0.0, 0.0, 1.0]]; 3]);
        assert_eq!(agree.labels, vec![2]);
        assert_eq!(agree.mean_probs[[0, 2]], 1.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut model = MsDcdaModel::new(ModelConfig::new(5, 2, 3), 8).unwrap();
        let mut g = Graph::new();
        let sources: Vec<_> = (0..3).map(|i| batch(6, 5, i)).collect();
        model.forward(&mut g, &sources, &batch(6, 5, 10)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        model.save(&path).unwrap();
        let back = MsDcdaModel::load(&path).unwrap();
        let x = batch(7, 5, 11);
        assert_eq!(model.predict(&x).unwrap(), back.predict(&x).unwrap());
        assert_eq!(back.n_branches(), 3);
    }

    #[test]
    fn joint_and_split_normalisation_agree_on_shapes() {
        let sources: Vec<_> = (0..3).map(|i| batch(5, 4, i)).collect();
        let target = batch(5, 4, 20);
        for joint in [true, false] {
            let cfg = ModelConfig {
                joint_batchnorm: joint,
                ..ModelConfig::new(4, 2, 3)
            };
            let mut model = MsDcdaModel::new(cfg, 2).unwrap();
            let mut g = Graph::new();
            let out = model.forward(&mut g, &sources, &target).unwrap();
            assert_eq!(g.value(out.common_target).dim(), (5, 128));
            assert!(out.common_source.iter().all(|&v| g.value(v).dim() == (5, 128)));
            assert!(out.branch_target.iter().all(|&v| g.value(v).dim() == (5, 64)));
        }
    }
}
