//! Training objectives and weighting signals.
//!
//! * multi-source MMD between each branch's source and target features,
//! * sub-domain contrastive discrepancy (SCD), a class-masked MMD that pulls
//!   same-class source/target clusters together and pushes different classes
//!   apart,
//! * cross entropy on labelled source batches,
//! * DISC, the mean L1 disagreement between branch classifiers on the target,
//! * the LDA trace-ratio score and the dynamic coefficient τ it feeds,
//! * the α/β ramp schedules and the weighted total.
//!
//! All kernel-based terms are linear combinations of entries of one joint
//! kernel matrix per branch, built over the stacked `[source; target]` batch,
//! so MMD and SCD share a single kernel evaluation.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BranchOutputs;
use crate::ndiff::{Graph, Matrix, Var};

pub const PROB_FLOOR: f64 = 1e-12;
pub const LDA_EPS: f64 = 1e-12;
pub const TAU_DENOM_GUARD: f64 = 1e-8;
const SIGMA2_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    /// σ² = median of pairwise squared distances in the joint batch / 2.
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub bandwidth: Bandwidth,
    /// Each multiplier scales σ²; kernel values are averaged over the set.
    pub multipliers: Vec<f64>,
    /// Whether gradients flow through the median-heuristic bandwidth.
    pub bandwidth_grad: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::Median,
            multipliers: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            bandwidth_grad: false,
        }
    }
}

impl KernelConfig {
    pub fn fixed(sigma: f64) -> Self {
        Self {
            bandwidth: Bandwidth::Fixed(sigma),
            multipliers: vec![1.0],
            bandwidth_grad: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.multipliers.is_empty() || self.multipliers.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
            return Err(Error::config("kernel multipliers must be a non-empty set of positive reals"));
        }
        if let Bandwidth::Fixed(s) = self.bandwidth {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::config("fixed kernel sigma must be positive"));
            }
        }
        Ok(())
    }
}

/// `exp(-‖x - y‖² / 2σ²)`.
pub fn gaussian_kernel(x: &[f64], y: &[f64], sigma: f64) -> f64 {
    let d: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d / (2.0 * sigma * sigma)).exp()
}

/// Kernel matrix over the stacked `[source; target]` rows of one branch.
#[derive(Debug, Clone, Copy)]
pub struct JointKernel {
    pub kernel: Var,
    pub n_source: usize,
    pub n_target: usize,
}

pub fn joint_kernel(g: &mut Graph, source: Var, target: Var, kcfg: &KernelConfig) -> Result<JointKernel> {
    kcfg.validate()?;
    let (ns, nt) = (g.value(source).nrows(), g.value(target).nrows());
    if ns < 2 || nt < 2 {
        return Err(Error::shape(format!("kernel discrepancy needs batches of at least 2 rows, got {ns} and {nt}")));
    }
    let z = g.concat_rows(&[source, target])?;
    let d = g.sq_dist(z);
    let sigma2 = match kcfg.bandwidth {
        Bandwidth::Fixed(s) => g.scalar_constant(s * s),
        Bandwidth::Median => {
            let s2 = g.median_bandwidth(d, SIGMA2_FLOOR)?;
            if kcfg.bandwidth_grad {
                s2
            } else {
                g.detach(s2)
            }
        }
    };
    let kernel = g.gaussian_kernel(d, sigma2, &kcfg.multipliers)?;
    Ok(JointKernel {
        kernel,
        n_source: ns,
        n_target: nt,
    })
}

fn mmd_weights(ns: usize, nt: usize) -> Matrix {
    let n = ns + nt;
    Matrix::from_shape_fn((n, n), |(u, v)| match (u < ns, v < ns) {
        (true, true) => 1.0 / (ns * ns) as f64,
        (false, false) => 1.0 / (nt * nt) as f64,
        _ => -1.0 / (ns * nt) as f64,
    })
}

/// Biased squared-MMD estimate from a precomputed joint kernel, clamped at 0.
pub fn mmd_from_kernel(g: &mut Graph, jk: &JointKernel) -> Result<Var> {
    let raw = g.weighted_sum(jk.kernel, mmd_weights(jk.n_source, jk.n_target))?;
    Ok(g.clamp_min(raw, 0.0))
}

pub fn mmd_pair(g: &mut Graph, source: Var, target: Var, kcfg: &KernelConfig) -> Result<Var> {
    let jk = joint_kernel(g, source, target, kcfg)?;
    mmd_from_kernel(g, &jk)
}

pub fn branch_kernels(g: &mut Graph, outputs: &BranchOutputs, kcfg: &KernelConfig) -> Result<Vec<JointKernel>> {
    outputs
        .branch_source
        .iter()
        .zip(&outputs.branch_target)
        .map(|(&s, &t)| joint_kernel(g, s, t, kcfg))
        .collect()
}

/// Mean of per-branch MMD terms. With `paper_literal` the divisor is the
/// number of individual sources (branches − 1) instead of the branch count.
pub fn mmd_multisource_from(g: &mut Graph, kernels: &[JointKernel], paper_literal: bool) -> Result<Var> {
    let k = kernels.len();
    if k == 0 {
        return Err(Error::shape("no branches"));
    }
    let divisor = if paper_literal && k > 1 { (k - 1) as f64 } else { k as f64 };
    let terms = kernels
        .iter()
        .map(|jk| Ok((1.0 / divisor, mmd_from_kernel(g, jk)?)))
        .collect::<Result<Vec<_>>>()?;
    g.lin_comb(&terms)
}

pub fn mmd_multisource(g: &mut Graph, outputs: &BranchOutputs, kcfg: &KernelConfig, paper_literal: bool) -> Result<Var> {
    let kernels = branch_kernels(g, outputs, kcfg)?;
    mmd_multisource_from(g, &kernels, paper_literal)
}

/// Target pseudo-labels of one branch with their confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub labels: Vec<usize>,
    pub confidence: Vec<f64>,
}

/// Constant weight matrix over the joint kernel such that `Σ W ⊙ K` is the
/// branch's SCD term, or `None` when no class has both a source sample and a
/// confident target sample. `scale` multiplies every coefficient.
fn scd_weights(
    source_labels: &[usize],
    pseudo: &PseudoLabels,
    n_classes: usize,
    threshold: f64,
    normalise: bool,
) -> Option<Matrix> {
    let ns = source_labels.len();
    let nt = pseudo.labels.len();
    let mut src_members = vec![Vec::new(); n_classes];
    for (u, &y) in source_labels.iter().enumerate() {
        src_members[y].push(u);
    }
    let mut tgt_members = vec![Vec::new(); n_classes];
    for (v, (&y, &c)) in pseudo.labels.iter().zip(&pseudo.confidence).enumerate() {
        if c >= threshold {
            tgt_members[y].push(ns + v);
        }
    }
    let valid = |c1: usize, c2: usize| !src_members[c1].is_empty() && !tgt_members[c2].is_empty();
    let outer: Vec<usize> = (0..n_classes).filter(|&c| valid(c, c)).collect();
    if outer.is_empty() {
        return None;
    }
    let scale = if normalise { 1.0 / outer.len() as f64 } else { 1.0 };
    let mut w = Matrix::zeros((ns + nt, ns + nt));
    let mut add_discrepancy = |c1: usize, c2: usize, coef: f64| {
        let (s, t) = (&src_members[c1], &tgt_members[c2]);
        let (a, b) = (s.len() as f64, t.len() as f64);
        for &u in s {
            for &v in s {
                w[[u, v]] += coef / (a * a);
            }
        }
        for &u in t {
            for &v in t {
                w[[u, v]] += coef / (b * b);
            }
        }
        for &u in s {
            for &v in t {
                w[[u, v]] -= 2.0 * coef / (a * b);
            }
        }
    };
    let m = n_classes as f64;
    for &c in &outer {
        add_discrepancy(c, c, scale);
        for c2 in (0..n_classes).filter(|&c2| c2 != c && valid(c, c2)) {
            add_discrepancy(c, c2, -scale / m);
        }
    }
    Some(w)
}

/// Sub-domain contrastive discrepancy from precomputed joint kernels.
///
/// Per branch, for every class `c` with source samples and confident target
/// pseudo-labelled samples: `D_cc − (1/M) Σ_{c'≠c} D_cc'`, where
/// `D_c1c2 = d1 + d2 − 2 d3` are class-masked kernel means. Class pairs with
/// an empty mask are skipped. By default the result is averaged over valid
/// classes and branches; `paper_literal` instead divides the plain sum by
/// `N (M + 1)` with `N` the number of individual sources.
#[allow(clippy::too_many_arguments)]
pub fn scd_from(
    g: &mut Graph,
    kernels: &[JointKernel],
    source_labels: &[&[usize]],
    pseudo: &[PseudoLabels],
    n_classes: usize,
    confidence_threshold: f64,
    paper_literal: bool,
) -> Result<Var> {
    let k = kernels.len();
    if source_labels.len() != k || pseudo.len() != k {
        return Err(Error::shape("scd: per-branch inputs must have one entry per branch"));
    }
    let mut terms = Vec::new();
    for ((jk, ys), pl) in kernels.iter().zip(source_labels).zip(pseudo) {
        if ys.len() != jk.n_source || pl.labels.len() != jk.n_target {
            return Err(Error::shape("scd: label counts do not match batch sizes"));
        }
        if let Some(&bad) = ys.iter().chain(&pl.labels).find(|&&y| y >= n_classes) {
            return Err(Error::shape(format!("scd: label {bad} >= {n_classes}")));
        }
        if let Some(w) = scd_weights(ys, pl, n_classes, confidence_threshold, !paper_literal) {
            terms.push(g.weighted_sum(jk.kernel, w)?);
        }
    }
    if terms.is_empty() {
        return Ok(g.scalar_constant(0.0));
    }
    let divisor = if paper_literal {
        (k.saturating_sub(1).max(1) * (n_classes + 1)) as f64
    } else {
        terms.len() as f64
    };
    let weighted: Vec<(f64, Var)> = terms.into_iter().map(|t| (1.0 / divisor, t)).collect();
    g.lin_comb(&weighted)
}

#[allow(clippy::too_many_arguments)]
pub fn scd(
    g: &mut Graph,
    outputs: &BranchOutputs,
    source_labels: &[&[usize]],
    pseudo: &[PseudoLabels],
    n_classes: usize,
    kcfg: &KernelConfig,
    confidence_threshold: f64,
    paper_literal: bool,
) -> Result<Var> {
    let kernels = branch_kernels(g, outputs, kcfg)?;
    scd_from(g, &kernels, source_labels, pseudo, n_classes, confidence_threshold, paper_literal)
}

/// Mean over branches of the mean negative log-probability of the true class.
pub fn cross_entropy(g: &mut Graph, probs: &[Var], labels: &[&[usize]]) -> Result<Var> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::shape("cross entropy: one label vector per branch required"));
    }
    let k = probs.len() as f64;
    let terms = probs
        .iter()
        .zip(labels)
        .map(|(&p, y)| Ok((1.0 / k, g.nll(p, y, PROB_FLOOR)?)))
        .collect::<Result<Vec<_>>>()?;
    g.lin_comb(&terms)
}

/// `(1/K²) Σ_j Σ_{i≠j} E|ŷ_i − ŷ_j|₁` over ordered branch pairs.
pub fn disc(g: &mut Graph, target_probs: &[Var]) -> Result<Var> {
    let k = target_probs.len();
    if k < 2 {
        return Err(Error::shape("disc needs at least two branches"));
    }
    let coef = 2.0 / (k * k) as f64;
    let mut terms = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in (i + 1)..k {
            terms.push((coef, g.l1_mean(target_probs[i], target_probs[j])?));
        }
    }
    g.lin_comb(&terms)
}

/// Running class-wise sums for the between/within scatter traces.
#[derive(Debug, Clone, PartialEq)]
pub struct LdaAccumulator {
    counts: Vec<usize>,
    sums: Vec<Vec<f64>>,
    sq_norms: Vec<f64>,
}

impl LdaAccumulator {
    pub fn new(n_classes: usize, dim: usize) -> Self {
        Self {
            counts: vec![0; n_classes],
            sums: vec![vec![0.0; dim]; n_classes],
            sq_norms: vec![0.0; n_classes],
        }
    }

    pub fn add(&mut self, features: &Matrix, labels: &[usize]) -> Result<()> {
        if features.nrows() != labels.len() {
            return Err(Error::shape("lda: one label per row required"));
        }
        let dim = self.sums.first().map_or(0, Vec::len);
        if features.ncols() != dim {
            return Err(Error::shape("lda: feature width changed"));
        }
        for (row, &y) in features.rows().into_iter().zip(labels) {
            if y >= self.counts.len() {
                return Err(Error::shape(format!("lda: label {y} out of range")));
            }
            self.counts[y] += 1;
            for (s, v) in self.sums[y].iter_mut().zip(row) {
                *s += v;
            }
            self.sq_norms[y] += row.dot(&row);
        }
        Ok(())
    }

    /// `(Tr S_b, Tr S_W)`.
    pub fn traces(&self) -> (f64, f64) {
        let dim = self.sums.first().map_or(0, Vec::len);
        let n: usize = self.counts.iter().sum();
        let mut total = vec![0.0; dim];
        let mut between = 0.0;
        let mut within = 0.0;
        for ((&cnt, sum), &sq) in self.counts.iter().zip(&self.sums).zip(&self.sq_norms) {
            if cnt == 0 {
                continue;
            }
            let mean_sq = sum.iter().map(|v| v * v).sum::<f64>() / cnt as f64;
            between += mean_sq;
            within += sq - mean_sq;
            for (t, v) in total.iter_mut().zip(sum) {
                *t += v;
            }
        }
        if n > 0 {
            between -= total.iter().map(|v| v * v).sum::<f64>() / n as f64;
        }
        (between.max(0.0), within.max(0.0))
    }

    /// `Tr S_b / (Tr S_W + ε)`; 0 with fewer than two present classes or a
    /// present class of a single sample.
    pub fn score(&self) -> f64 {
        let present: Vec<usize> = self.counts.iter().copied().filter(|&c| c > 0).collect();
        if present.len() < 2 || present.iter().any(|&c| c < 2) {
            return 0.0;
        }
        let (sb, sw) = self.traces();
        sb / (sw + LDA_EPS)
    }
}

pub fn lda_score(features: &Matrix, labels: &[usize], n_classes: usize) -> Result<f64> {
    let mut acc = LdaAccumulator::new(n_classes, features.ncols());
    acc.add(features, labels)?;
    Ok(acc.score())
}

/// Running extrema used to min-max normalise the LDA score and the MMD before
/// they enter τ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminabilityState {
    pub j_raw: f64,
    pub mmd_raw: f64,
    pub j_min: f64,
    pub j_max: f64,
    pub mmd_min: f64,
    pub mmd_max: f64,
}

impl Default for DiscriminabilityState {
    fn default() -> Self {
        Self {
            j_raw: 0.0,
            mmd_raw: 0.0,
            j_min: f64::INFINITY,
            j_max: f64::NEG_INFINITY,
            mmd_min: f64::INFINITY,
            mmd_max: f64::NEG_INFINITY,
        }
    }
}

fn min_max(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

impl DiscriminabilityState {
    pub fn update(&mut self, j_raw: f64, mmd_raw: f64) {
        self.j_raw = j_raw;
        self.mmd_raw = mmd_raw;
        self.j_min = self.j_min.min(j_raw);
        self.j_max = self.j_max.max(j_raw);
        self.mmd_min = self.mmd_min.min(mmd_raw);
        self.mmd_max = self.mmd_max.max(mmd_raw);
    }

    /// `(mmd, j)` scaled to `[0, 1]` by the running extrema.
    pub fn normalized(&self) -> (f64, f64) {
        (
            min_max(self.mmd_raw, self.mmd_min, self.mmd_max),
            min_max(self.j_raw, self.j_min, self.j_max),
        )
    }

    pub fn tau(&self) -> f64 {
        let (l, j) = self.normalized();
        dynamic_tau(l, j)
    }
}

/// `τ = L / (L + 1 − J)` on normalised inputs, 0.5 when the denominator
/// vanishes.
pub fn dynamic_tau(mmd_norm: f64, j_norm: f64) -> f64 {
    let gap = 1.0 - j_norm;
    if mmd_norm + gap < TAU_DENOM_GUARD {
        0.5
    } else if mmd_norm <= 0.0 {
        0.0
    } else {
        // same ratio, written so rounding cannot break monotonicity in L
        (1.0 / (1.0 + gap / mmd_norm)).clamp(0.0, 1.0)
    }
}

/// `α = 2 / (1 + e^{−10p}) − 1`, `β = α / 10`, with `p = iter / total`.
pub fn schedules(iter: u64, total_iters: u64) -> Result<(f64, f64)> {
    if total_iters == 0 || iter > total_iters {
        return Err(Error::config(format!("schedule: iteration {iter} of {total_iters}")));
    }
    let p = iter as f64 / total_iters as f64;
    let alpha = 2.0 / (1.0 + (-10.0 * p).exp()) - 1.0;
    Ok((alpha, alpha / 10.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ce: f64,
    pub mmd: f64,
    pub scd: f64,
    pub disc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub iter: u64,
    pub ce: f64,
    pub mmd: f64,
    pub scd: f64,
    pub disc: f64,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub total: f64,
}

/// Weights of `(ce, mmd, scd, disc)` in the total.
pub fn total_weights(alpha: f64, beta: f64, tau: f64) -> [f64; 4] {
    [1.0, alpha * tau, beta, alpha * (1.0 - tau)]
}

/// `L = ce + α((1 − τ) disc + τ mmd) + β scd`.
pub fn total_loss(iter: u64, parts: LossParts, alpha: f64, beta: f64, tau: f64) -> Result<LossBreakdown> {
    for (name, v) in [
        ("ce", parts.ce),
        ("mmd", parts.mmd),
        ("scd", parts.scd),
        ("disc", parts.disc),
        ("tau", tau),
        ("alpha", alpha),
        ("beta", beta),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("iteration {iter}: loss term `{name}` is {v}")));
        }
    }
    let total = parts.ce + alpha * ((1.0 - tau) * parts.disc + tau * parts.mmd) + beta * parts.scd;
    Ok(LossBreakdown {
        iter,
        ce: parts.ce,
        mmd: parts.mmd,
        scd: parts.scd,
        disc: parts.disc,
        tau,
        alpha,
        beta,
        total,
    })
}

/// Training log as CSV: `iter,ce,mmd,scd,disc,tau,alpha,beta,total`.
pub fn loss_log_csv(rows: &[LossBreakdown]) -> Vec<u8> {
    let mut out = Vec::new();
    writeln!(out, "iter,ce,mmd,scd,disc,tau,alpha,beta,total").expect("vec write");
    for r in rows {
        writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            r.iter, r.ce, r.mmd, r.scd, r.disc, r.tau, r.alpha, r.beta, r.total
        )
        .expect("vec write");
    }
    out
}

pub fn write_loss_log(path: &Path, rows: &[LossBreakdown]) -> Result<()> {
    crate::io::write_atomic(path, &loss_log_csv(rows))
}
