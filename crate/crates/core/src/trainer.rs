//! The training loop: batch every source domain and the target, run the
//! network, assemble the weighted objective and take an Adam step.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{concatenate, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{FeatureMatrix, SourceBundle};
use crate::error::{Error, Result};
use crate::losses::{
    self, DiscriminabilityState, KernelConfig, LdaAccumulator, LossBreakdown, LossParts, PseudoLabels,
};
use crate::model::{BranchOutputs, MsDcdaModel};
use crate::ndiff::{AdamState, Graph, Matrix, Mode, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mmd,
    Scd,
    Disc,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Mmd, LossKind::Scd, LossKind::Disc];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mmd => "mmd",
            LossKind::Scd => "scd",
            LossKind::Disc => "disc",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mmd" => Ok(LossKind::Mmd),
            "scd" => Ok(LossKind::Scd),
            "disc" => Ok(LossKind::Disc),
            other => Err(Error::config(format!("unknown loss `{other}` (expected mmd, scd or disc)"))),
        }
    }
}

/// Where the LDA score feeding τ comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LdaMode {
    /// Source CFE features of the current iteration only.
    Batch,
    /// All source CFE features seen so far in the current epoch.
    Epoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub kernel: KernelConfig,
    pub confidence_threshold: f64,
    pub rng_seed: u64,
    pub paper_literal_constants: bool,
    /// `DISC : MMD` weights replacing the dynamic τ.
    pub static_ratio: Option<(f64, f64)>,
    pub disabled_losses: BTreeSet<LossKind>,
    pub lda_mode: LdaMode,
    #[serde(skip)]
    pub progress: bool,
}

impl TrainConfig {
    /// Defaults for an `n_classes` problem: batch 32 for three classes, 16
    /// for four or more.
    pub fn for_classes(n_classes: usize) -> Self {
        Self {
            epochs: 50,
            batch_size: if n_classes >= 4 { 16 } else { 32 },
            lr: 5e-3,
            kernel: KernelConfig::default(),
            confidence_threshold: 0.8,
            rng_seed: 0,
            paper_literal_constants: false,
            static_ratio: None,
            disabled_losses: BTreeSet::new(),
            lda_mode: LdaMode::Batch,
            progress: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch size must be at least 2"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::config("confidence threshold must lie in [0, 1]"));
        }
        if let Some((a, b)) = self.static_ratio {
            if !(a >= 0.0 && b >= 0.0 && a + b > 0.0 && (a + b).is_finite()) {
                return Err(Error::config("static ratio needs non-negative parts with a positive sum"));
            }
        }
        self.kernel.validate()
    }

    pub fn enabled(&self, kind: LossKind) -> bool {
        !self.disabled_losses.contains(&kind)
    }

    /// τ implied by a static `DISC : MMD` ratio.
    pub fn static_tau(&self) -> Option<f64> {
        self.static_ratio.map(|(disc, mmd)| mmd / (disc + mmd))
    }
}

/// Per-row argmax (lowest index on ties) and its probability.
pub fn pseudo_label(probs: &Matrix) -> PseudoLabels {
    let labels = crate::model::argmax_rows(probs);
    let confidence = labels.iter().enumerate().map(|(r, &c)| probs[[r, c]]).collect();
    PseudoLabels { labels, confidence }
}

/// One iteration's worth of rows: a batch per branch domain and a target batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub sources: Vec<Matrix>,
    pub source_labels: Vec<Vec<usize>>,
    pub target: Matrix,
}

/// Graph handles of the individual objectives for one batch.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub outputs: BranchOutputs,
    pub ce: Var,
    pub mmd: Var,
    pub scd: Option<Var>,
    pub disc: Option<Var>,
    pub pseudo: Vec<PseudoLabels>,
}

impl LossTerms {
    /// Scalar values, disabled terms reported as 0.
    pub fn parts(&self, g: &Graph, cfg: &TrainConfig) -> LossParts {
        LossParts {
            ce: g.scalar(self.ce),
            mmd: if cfg.enabled(LossKind::Mmd) { g.scalar(self.mmd) } else { 0.0 },
            scd: self.scd.map_or(0.0, |v| g.scalar(v)),
            disc: self.disc.map_or(0.0, |v| g.scalar(v)),
        }
    }
}

/// Forward pass plus every enabled objective. MMD is always evaluated since
/// τ tracks it. Pseudo-labels come from the live target probabilities unless
/// supplied.
pub fn loss_terms(
    g: &mut Graph,
    model: &mut MsDcdaModel,
    batch: &Batch,
    cfg: &TrainConfig,
    pseudo_override: Option<&[PseudoLabels]>,
) -> Result<LossTerms> {
    let outputs = model.forward(g, &batch.sources, &batch.target)?;
    let labels: Vec<&[usize]> = batch.source_labels.iter().map(Vec::as_slice).collect();
    let ce = losses::cross_entropy(g, &outputs.probs_source, &labels)?;
    let kernels = losses::branch_kernels(g, &outputs, &cfg.kernel)?;
    let mmd = losses::mmd_multisource_from(g, &kernels, cfg.paper_literal_constants)?;
    let pseudo = match pseudo_override {
        Some(p) => p.to_vec(),
        None => outputs.probs_target.iter().map(|&p| pseudo_label(g.value(p))).collect(),
    };
    let scd = if cfg.enabled(LossKind::Scd) {
        Some(losses::scd_from(
            g,
            &kernels,
            &labels,
            &pseudo,
            model.n_classes(),
            cfg.confidence_threshold,
            cfg.paper_literal_constants,
        )?)
    } else {
        None
    };
    let disc = if cfg.enabled(LossKind::Disc) {
        Some(losses::disc(g, &outputs.probs_target)?)
    } else {
        None
    };
    Ok(LossTerms {
        outputs,
        ce,
        mmd,
        scd,
        disc,
        pseudo,
    })
}

/// `ce + α((1 − τ) disc + τ mmd) + β scd` over the enabled terms.
pub fn assemble(g: &mut Graph, terms: &LossTerms, cfg: &TrainConfig, alpha: f64, beta: f64, tau: f64) -> Result<Var> {
    let [w_ce, w_mmd, w_scd, w_disc] = losses::total_weights(alpha, beta, tau);
    let mut parts = vec![(w_ce, terms.ce)];
    if cfg.enabled(LossKind::Mmd) {
        parts.push((w_mmd, terms.mmd));
    }
    if let Some(v) = terms.scd {
        parts.push((w_scd, v));
    }
    if let Some(v) = terms.disc {
        parts.push((w_disc, v));
    }
    g.lin_comb(&parts)
}

/// Shuffled row order over one domain; reshuffles when exhausted.
#[derive(Debug, Clone)]
struct DomainStream {
    order: Vec<usize>,
    pos: usize,
}

impl DomainStream {
    fn new(rows: usize) -> Self {
        Self {
            order: (0..rows).collect(),
            pos: rows,
        }
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) {
        self.order.shuffle(rng);
        self.pos = 0;
    }

    fn take(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.reset(rng);
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub loss_log: Vec<LossBreakdown>,
    pub iterations: u64,
    pub wall_time_s: f64,
    pub final_model: MsDcdaModel,
}

pub fn iterations_per_epoch(sources: &SourceBundle, target: &FeatureMatrix, batch_size: usize) -> usize {
    let largest = sources.domains().map(FeatureMatrix::rows).chain([target.rows()]).max().unwrap_or(0);
    largest.div_ceil(batch_size)
}

fn pool_rows(g: &Graph, vars: &[Var]) -> Result<Matrix> {
    let views: Vec<_> = vars.iter().map(|&v| g.value(v).view()).collect();
    concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))
}

/// Trains `model` on labelled `sources` and the (label-blind) `target`.
pub fn train(
    mut model: MsDcdaModel,
    sources: &SourceBundle,
    target: &FeatureMatrix,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let started = Instant::now();
    let n_classes = model.n_classes();
    if model.n_branches() != sources.n_sources() + 1 {
        return Err(Error::config(format!(
            "model has {} branches but there are {} sources (+1 ensemble)",
            model.n_branches(),
            sources.n_sources()
        )));
    }
    model.set_mode(Mode::Train);
    let dim = model.config.input_dim;
    let domains: Vec<&FeatureMatrix> = sources.domains().collect();
    for d in domains.iter().copied().chain([target]) {
        if d.feature_dim() != dim {
            return Err(Error::shape(format!(
                "{}/{}: {} features, model expects {dim}",
                d.subject_id,
                d.session_id,
                d.feature_dim()
            )));
        }
        if d.rows() == 0 {
            return Err(Error::shape(format!("{}/{}: no rows", d.subject_id, d.session_id)));
        }
    }
    let domain_labels = domains
        .iter()
        .map(|d| {
            d.check_labels(n_classes)?;
            d.labels()
        })
        .collect::<Result<Vec<_>>>()?;

    let per_epoch = iterations_per_epoch(sources, target, cfg.batch_size);
    let total = (per_epoch * cfg.epochs) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut streams: Vec<DomainStream> = domains.iter().map(|d| DomainStream::new(d.rows())).collect();
    let mut target_stream = DomainStream::new(target.rows());
    let mut adam = AdamState::new(&model.store, cfg.lr);
    let mut disc_state = DiscriminabilityState::default();
    let mut log = Vec::with_capacity(total as usize);
    let static_tau = cfg.static_tau();
    let cfe_dim = *model.config.cfe_widths.last().unwrap_or(&dim);

    let mut iter = 0u64;
    for epoch in 0..cfg.epochs {
        for s in streams.iter_mut().chain([&mut target_stream]) {
            s.reset(&mut rng);
        }
        let mut epoch_lda = LdaAccumulator::new(n_classes, cfe_dim);
        for _ in 0..per_epoch {
            let mut batch = Batch {
                sources: Vec::with_capacity(domains.len()),
                source_labels: Vec::with_capacity(domains.len()),
                target: Matrix::zeros((0, dim)),
            };
            for ((d, labels), stream) in domains.iter().zip(&domain_labels).zip(&mut streams) {
                let idx = stream.take(cfg.batch_size, &mut rng);
                batch.sources.push(d.select_rows(&idx));
                batch.source_labels.push(idx.iter().map(|&i| labels[i]).collect());
            }
            batch.target = target.select_rows(&target_stream.take(cfg.batch_size, &mut rng));

            let mut g = Graph::new();
            let terms = loss_terms(&mut g, &mut model, &batch, cfg, None)?;
            let pooled = pool_rows(&g, &terms.outputs.common_source)?;
            let pooled_labels = batch.source_labels.concat();
            let j = match cfg.lda_mode {
                LdaMode::Batch => losses::lda_score(&pooled, &pooled_labels, n_classes)?,
                LdaMode::Epoch => {
                    epoch_lda.add(&pooled, &pooled_labels)?;
                    epoch_lda.score()
                }
            };
            disc_state.update(j, g.scalar(terms.mmd));
            let tau = static_tau.unwrap_or_else(|| disc_state.tau());
            let (alpha, beta) = losses::schedules(iter, total)?;
            let breakdown = losses::total_loss(iter, terms.parts(&g, cfg), alpha, beta, tau)?;
            let loss = assemble(&mut g, &terms, cfg, alpha, beta, tau)?;
            if !g.scalar(loss).is_finite() {
                return Err(non_finite(&breakdown, "total"));
            }
            model.store.zero_grad();
            g.backward(loss, &mut model.store)?;
            adam.step(&mut model.store).map_err(|e| match e {
                Error::Numeric(msg) => non_finite(&breakdown, &msg),
                other => other,
            })?;
            log.push(breakdown);
            iter += 1;
        }
        if cfg.progress {
            if let Some(last) = log.last() {
                eprintln!(
                    "epoch {}/{} ce={:.4} mmd={:.4} scd={:.4} disc={:.4} tau={:.3} total={:.4}",
                    epoch + 1,
                    cfg.epochs,
                    last.ce,
                    last.mmd,
                    last.scd,
                    last.disc,
                    last.tau,
                    last.total
                );
            }
        }
    }
    Ok(TrainReport {
        iterations: log.len() as u64,
        loss_log: log,
        wall_time_s: started.elapsed().as_secs_f64(),
        final_model: model,
    })
}

fn non_finite(b: &LossBreakdown, what: &str) -> Error {
    Error::Numeric(format!(
        "iteration {}: {what}; breakdown {}",
        b.iter,
        serde_json::to_string(b).unwrap_or_default()
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, SyntheticSpec};
    use crate::model::ModelConfig;
    use ndarray::array;

    fn small_task(seed: u64) -> (SourceBundle, FeatureMatrix) {
        generate_synthetic(&SyntheticSpec {
            n_sources: 2,
            n_classes: 3,
            feature_dim: 6,
            samples_per_class: 10,
            class_separation: 3.0,
            domain_shift_scale: 1.0,
            rng_seed: seed,
        })
        .unwrap()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            rng_seed: 3,
            ..TrainConfig::for_classes(3)
        }
    }

    #[test]
    fn pseudo_label_cases() {
        let p = pseudo_label(&array![[0.7, 0.2, 0.1], [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], [0.0, 0.0, 1.0]]);
        assert_eq!(p.labels, vec![0, 0, 2]);
        assert_eq!(p.confidence, vec![0.7, 1.0 / 3.0, 1.0]);
    }

    #[test]
    fn loss_kind_parsing() {
        assert_eq!("SCD".parse::<LossKind>().unwrap(), LossKind::Scd);
        assert!("ce".parse::<LossKind>().is_err());
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let (src, tgt) = small_task(1);
        let cfg = quick_cfg();
        let run = || {
            let model = MsDcdaModel::new(ModelConfig::new(6, 2, 3), 9).unwrap();
            train(model, &src, &tgt.unlabeled(), &cfg).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.loss_log, b.loss_log);
        assert_eq!(a.iterations, a.loss_log.len() as u64);
        assert_eq!(a.iterations, 2 * 60usize.div_ceil(8) as u64);
    }

    #[test]
    fn all_disabled_reduces_to_ce() {
        let (src, tgt) = small_task(2);
        let cfg = TrainConfig {
            disabled_losses: LossKind::ALL.into_iter().collect(),
            ..quick_cfg()
        };
        let model = MsDcdaModel::new(ModelConfig::new(6, 2, 3), 1).unwrap();
        let report = train(model, &src, &tgt, &cfg).unwrap();
        for row in &report.loss_log {
            assert_eq!(row.total, row.ce);
            assert_eq!((row.mmd, row.scd, row.disc), (0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn static_ratio_fixes_tau() {
        let (src, tgt) = small_task(3);
        let cfg = TrainConfig {
            static_ratio: Some((3.0, 7.0)),
            ..quick_cfg()
        };
        let model = MsDcdaModel::new(ModelConfig::new(6, 2, 3), 1).unwrap();
        let report = train(model, &src, &tgt, &cfg).unwrap();
        assert!(report.loss_log.iter().all(|r| r.tau == 0.7));
    }

    #[test]
    fn dynamic_tau_stays_in_unit_interval() {
        let (src, tgt) = small_task(4);
        let model = MsDcdaModel::new(ModelConfig::new(6, 2, 3), 1).unwrap();
        for mode in [LdaMode::Batch, LdaMode::Epoch] {
            let cfg = TrainConfig { lda_mode: mode, ..quick_cfg() };
            let report = train(model.clone(), &src, &tgt, &cfg).unwrap();
            assert!(report.loss_log.iter().all(|r| (0.0..=1.0).contains(&r.tau)));
        }
    }

    #[test]
    fn branch_mismatch_is_a_config_error() {
        let (src, tgt) = small_task(5);
        let model = MsDcdaModel::new(ModelConfig::new(6, 4, 3), 1).unwrap();
        let err = train(model, &src, &tgt, &quick_cfg()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unlabeled_source_is_rejected() {
        let (mut src, tgt) = small_task(6);
        src.individual_sources[0].labels = None;
        let model = MsDcdaModel::new(ModelConfig::new(6, 2, 3), 1).unwrap();
        assert!(train(model, &src, &tgt, &quick_cfg()).is_err());
    }
}
