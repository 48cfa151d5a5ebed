//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Graph`] is built fresh for every training iteration. Leaves are either
//! constants, free variables (gradients can be read back with
//! [`Graph::grad_wrt`]) or bindings to entries of a [`ParamStore`]. Node
//! indices are assigned in construction order, which is a valid topological
//! order, so the backward sweep is a single reverse pass over the tape.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor together with its gradient buffer.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let grad = Matrix::zeros(value.raw_dim());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].grad
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Array1<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Array1<f64>,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Softmax {
        x: Var,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SqDist {
        x: Var,
    },
    MedianBandwidth {
        d: Var,
        picks: Vec<((usize, usize), f64)>,
    },
    GaussianKernel {
        d: Var,
        sigma2: Var,
        multipliers: Vec<f64>,
    },
    WeightedSum {
        x: Var,
        weights: Matrix,
    },
    Nll {
        p: Var,
        labels: Vec<usize>,
        floor: f64,
    },
    L1Mean {
        a: Var,
        b: Var,
    },
    LinComb {
        terms: Vec<(f64, Var)>,
    },
    ClampMin {
        x: Var,
        min: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_same_shape(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn scalar(v: f64) -> Matrix {
    Matrix::from_elem((1, 1), v)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, v: f64) -> Var {
        self.constant(scalar(v))
    }

    /// Free leaf whose gradient can be queried with [`Graph::grad_wrt`].
    pub fn variable(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// `x · wᵀ + b` with `x: n×in`, `w: out×in`, `b: 1×out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.ncols() != wv.ncols() || bv.dim() != (1, wv.nrows()) {
            return Err(Error::shape(format!(
                "affine: x {:?}, w {:?}, b {:?}",
                xv.dim(),
                wv.dim(),
                bv.dim()
            )));
        }
        let out = xv.dot(&wv.t()) + bv;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Affine { x, w, b }, rg))
    }

    /// Train-mode batch normalisation over rows. Returns the output together
    /// with the batch mean and biased batch variance so the caller can update
    /// running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Array1<f64>, Array1<f64>)> {
        let xv = self.value(x);
        let (n, f) = xv.dim();
        if n < 2 {
            return Err(Error::shape("batch norm in train mode needs a batch of at least 2"));
        }
        if self.value(gamma).dim() != (1, f) || self.value(beta).dim() != (1, f) {
            return Err(Error::shape("batch norm: gamma/beta width mismatch"));
        }
        let mean = xv.mean_axis(Axis(0)).expect("non-empty");
        let centered = xv - &mean;
        let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty");
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = &centered * &inv_std;
        let out = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let node = self.push(
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((node, mean, var))
    }

    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Array1<f64>,
        running_var: &Array1<f64>,
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let f = xv.ncols();
        if running_mean.len() != f || self.value(gamma).dim() != (1, f) {
            return Err(Error::shape("batch norm: width mismatch"));
        }
        let inv_std = running_var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = (xv - running_mean) * &inv_std;
        let out = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).mapv(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu { x, slope }, rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - max).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let rg = self.rg(x);
        self.push(out, Op::Softmax { x }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::shape(format!("concat_rows: {e}")))?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Rows `start..end` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let n = self.value(x).nrows();
        if start >= end || end > n {
            return Err(Error::shape(format!("slice_rows: {start}..{end} of {n} rows")));
        }
        let out = self.value(x).slice(ndarray::s![start..end, ..]).to_owned();
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    /// Pairwise squared Euclidean distances between the rows of `x`.
    pub fn sq_dist(&mut self, x: Var) -> Var {
        let out = pairwise_sq_dist(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::SqDist { x }, rg)
    }

    /// Median heuristic: half the median of the strictly upper-triangular
    /// entries of a square distance matrix, floored at `floor`.
    pub fn median_bandwidth(&mut self, d: Var, floor: f64) -> Result<Var> {
        let dv = self.value(d);
        let n = dv.nrows();
        if n < 2 || dv.ncols() != n {
            return Err(Error::shape("median bandwidth needs a square matrix with n >= 2"));
        }
        let mut entries: Vec<((usize, usize), f64)> = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                entries.push(((i, j), dv[[i, j]]));
            }
        }
        entries.sort_by(|a, b| a.1.total_cmp(&b.1));
        let m = entries.len();
        let picks: Vec<((usize, usize), f64)> = if m % 2 == 1 {
            vec![(entries[m / 2].0, 0.5)]
        } else {
            vec![(entries[m / 2 - 1].0, 0.25), (entries[m / 2].0, 0.25)]
        };
        let half_median: f64 = picks.iter().map(|&((i, j), w)| w * dv[[i, j]]).sum();
        let (value, picks) = if half_median > floor {
            (half_median, picks)
        } else {
            (floor, Vec::new())
        };
        let rg = self.rg(d);
        Ok(self.push(scalar(value), Op::MedianBandwidth { d, picks }, rg))
    }

    /// Multi-bandwidth Gaussian kernel evaluated on a matrix of squared
    /// distances: mean over `m` of `exp(-d / (2 σ² m))`.
    pub fn gaussian_kernel(&mut self, d: Var, sigma2: Var, multipliers: &[f64]) -> Result<Var> {
        if self.value(sigma2).dim() != (1, 1) {
            return Err(Error::shape("gaussian kernel: sigma² must be 1x1"));
        }
        if multipliers.is_empty() {
            return Err(Error::config("gaussian kernel: empty multiplier set"));
        }
        let s2 = self.scalar(sigma2);
        let k = multipliers.len() as f64;
        let mut out = Matrix::zeros(self.value(d).raw_dim());
        for &m in multipliers {
            let denom = 2.0 * s2 * m;
            out.zip_mut_with(self.value(d), |o, &dv| *o += (-dv / denom).exp() / k);
        }
        let rg = self.rg(d) || self.rg(sigma2);
        Ok(self.push(
            out,
            Op::GaussianKernel {
                d,
                sigma2,
                multipliers: multipliers.to_vec(),
            },
            rg,
        ))
    }

    /// `Σ w ⊙ x` as a 1x1 node; `weights` are constants.
    pub fn weighted_sum(&mut self, x: Var, weights: Matrix) -> Result<Var> {
        check_same_shape(self.value(x), &weights, "weighted_sum")?;
        let s = (self.value(x) * &weights).sum();
        let rg = self.rg(x);
        Ok(self.push(scalar(s), Op::WeightedSum { x, weights }, rg))
    }

    /// Mean over rows of `-ln(max(p[r, label_r], floor))`.
    pub fn nll(&mut self, p: Var, labels: &[usize], floor: f64) -> Result<Var> {
        let pv = self.value(p);
        if pv.nrows() != labels.len() || pv.nrows() == 0 {
            return Err(Error::shape(format!(
                "nll: {} rows vs {} labels",
                pv.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= pv.ncols()) {
            return Err(Error::shape(format!("nll: label {bad} >= {} classes", pv.ncols())));
        }
        let n = labels.len() as f64;
        let s: f64 = labels
            .iter()
            .enumerate()
            .map(|(r, &y)| -pv[[r, y]].max(floor).ln())
            .sum();
        let rg = self.rg(p);
        Ok(self.push(
            scalar(s / n),
            Op::Nll {
                p,
                labels: labels.to_vec(),
                floor,
            },
            rg,
        ))
    }

    /// Mean over rows of the L1 distance between rows of `a` and `b`.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape(self.value(a), self.value(b), "l1_mean")?;
        let n = self.value(a).nrows().max(1) as f64;
        let s = (self.value(a) - self.value(b)).mapv(f64::abs).sum() / n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(scalar(s), Op::L1Mean { a, b }, rg))
    }

    /// `Σ cᵢ · xᵢ` over same-shaped nodes.
    pub fn lin_comb(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| Error::shape("lin_comb: no terms"))?;
        let mut out = Matrix::zeros(self.value(first.1).raw_dim());
        for &(c, v) in terms {
            check_same_shape(&out, self.value(v), "lin_comb")?;
            out.scaled_add(c, self.value(v));
        }
        let rg = terms.iter().any(|&(_, v)| self.rg(v));
        Ok(self.push(
            out,
            Op::LinComb {
                terms: terms.to_vec(),
            },
            rg,
        ))
    }

    pub fn clamp_min(&mut self, x: Var, min: f64) -> Var {
        let out = self.value(x).mapv(|v| v.max(min));
        let rg = self.rg(x);
        self.push(out, Op::ClampMin { x, min }, rg)
    }

    fn sweep(&self, loss: Var) -> Result<Vec<Option<Matrix>>> {
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).dim()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    /// Reverse sweep from `loss`, accumulating gradients into every bound
    /// parameter. Calling it twice without zeroing doubles the gradients.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.sweep(loss)?;
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.get_mut(*id).grad += &g;
            }
        }
        Ok(())
    }

    /// Gradients of `loss` with respect to arbitrary nodes (zeros when unreachable).
    pub fn grad_wrt(&self, loss: Var, vars: &[Var]) -> Result<Vec<Matrix>> {
        let mut grads = self.sweep(loss)?;
        Ok(vars
            .iter()
            .map(|v| {
                grads[v.0]
                    .take()
                    .unwrap_or_else(|| Matrix::zeros(self.value(*v).raw_dim()))
            })
            .collect())
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, delta: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Affine { x, w, b } => {
                acc(*x, g.dot(self.value(*w)));
                acc(*w, g.t().dot(self.value(*x)));
                acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = xhat.nrows() as f64;
                let gv = self.value(*gamma);
                acc(*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                let dxhat = g * gv;
                let sum_d = dxhat.sum_axis(Axis(0));
                let sum_dx = (&dxhat * xhat).sum_axis(Axis(0));
                let dx = (dxhat * n - &sum_d - xhat * &sum_dx) * &(inv_std / n);
                acc(*x, dx);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                acc(*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(*x, g * gv * inv_std);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                dx.zip_mut_with(xv, |d, &v| {
                    if v <= 0.0 {
                        *d *= slope
                    }
                });
                acc(*x, dx);
            }
            Op::Softmax { x } => {
                let y = &self.nodes[idx].value;
                let dot = (g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(*x, y * &(g - &dot));
            }
            Op::ConcatRows { parts } => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).nrows();
                    acc(p, g.slice(ndarray::s![start..start + rows, ..]).to_owned());
                    start += rows;
                }
            }
            Op::SliceRows { x, start } => {
                let mut dx = Matrix::zeros(self.value(*x).raw_dim());
                dx.slice_mut(ndarray::s![*start..*start + g.nrows(), ..]).assign(g);
                acc(*x, dx);
            }
            Op::SqDist { x } => {
                let xv = self.value(*x);
                let sym = g + &g.t();
                // dX_i = 2 Σ_j S_ij (x_i - x_j)
                let row_sums = sym.sum_axis(Axis(1)).insert_axis(Axis(1));
                let dx = (xv * &row_sums - sym.dot(xv)) * 2.0;
                acc(*x, dx);
            }
            Op::MedianBandwidth { d, picks } => {
                let gs = g[[0, 0]];
                let mut dd = Matrix::zeros(self.value(*d).raw_dim());
                for &((i, j), w) in picks {
                    dd[[i, j]] += gs * w;
                }
                acc(*d, dd);
            }
            Op::GaussianKernel {
                d,
                sigma2,
                multipliers,
            } => {
                let dv = self.value(*d);
                let s2 = self.scalar(*sigma2);
                let k = multipliers.len() as f64;
                let mut dd = Matrix::zeros(dv.raw_dim());
                let mut ds2 = 0.0;
                for &m in multipliers {
                    let denom = 2.0 * s2 * m;
                    ndarray::Zip::from(&mut dd).and(dv).and(g).for_each(|o, &dist, &gg| {
                        let km = (-dist / denom).exp() / k;
                        *o -= gg * km / denom;
                        ds2 += gg * km * dist / (denom * s2);
                    });
                }
                acc(*d, dd);
                acc(*sigma2, scalar(ds2));
            }
            Op::WeightedSum { x, weights } => {
                acc(*x, weights * g[[0, 0]]);
            }
            Op::Nll { p, labels, floor } => {
                let pv = self.value(*p);
                let n = labels.len() as f64;
                let mut dp = Matrix::zeros(pv.raw_dim());
                for (r, &y) in labels.iter().enumerate() {
                    let v = pv[[r, y]];
                    if v > *floor {
                        dp[[r, y]] = -g[[0, 0]] / (n * v);
                    }
                }
                acc(*p, dp);
            }
            Op::L1Mean { a, b } => {
                let n = self.value(*a).nrows().max(1) as f64;
                let sign = (self.value(*a) - self.value(*b)).mapv(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }) * (g[[0, 0]] / n);
                acc(*b, -&sign);
                acc(*a, sign);
            }
            Op::LinComb { terms } => {
                for &(c, v) in terms {
                    acc(v, g * c);
                }
            }
            Op::ClampMin { x, min } => {
                let mut dx = g.clone();
                dx.zip_mut_with(self.value(*x), |d, &v| {
                    if v < *min {
                        *d = 0.0
                    }
                });
                acc(*x, dx);
            }
        }
    }
}

/// Pairwise squared distances `‖x_i - x_j‖²`, clamped at zero.
pub fn pairwise_sq_dist(x: &Matrix) -> Matrix {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r));
    let mut d = x.dot(&x.t()) * -2.0;
    let n = x.nrows();
    for i in 0..n {
        for j in 0..n {
            d[[i, j]] = (d[[i, j]] + norms[i] + norms[j]).max(0.0);
        }
        d[[i, i]] = 0.0;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn linear_map_gradient_replicates_input() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[0.5, -1.0, 2.0], [1.0, 0.0, 3.0]]);
        let b = store.add("b", Matrix::zeros((1, 2)));
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, 2.0, 3.0]]);
        let wv = g.param(&store, w);
        let bv = g.param(&store, b);
        let y = g.affine(x, wv, bv).unwrap();
        let loss = g.weighted_sum(y, Matrix::ones((1, 2))).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w), &array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]);
        assert_eq!(store.grad(b), &array![[1.0, 1.0]]);
    }

    #[test]
    fn backward_twice_doubles() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[0.3, -0.7]]);
        let b = store.add("b", array![[0.1]]);
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, 2.0], [-1.0, 0.5]]);
        let wv = g.param(&store, w);
        let bv = g.param(&store, b);
        let y = g.affine(x, wv, bv).unwrap();
        let y = g.leaky_relu(y, 0.01);
        let loss = g.weighted_sum(y, array![[1.0], [2.0]]).unwrap();
        g.backward(loss, &mut store).unwrap();
        let once = store.grad(w).clone();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w), &(&once * 2.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.variable(Matrix::ones((2, 2)));
        assert!(matches!(g.backward(x, &mut store), Err(Error::Shape(_))));
    }

    #[test]
    fn leaky_relu_uses_slope() {
        let mut g = Graph::new();
        let x = g.constant(array![[-1.0, 2.0]]);
        let y = g.leaky_relu(x, 0.01);
        assert_eq!(g.value(y), &array![[-0.01, 2.0]]);
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(array![[3.0, 3.0, 3.0, 3.0]]);
        let y = g.softmax(x);
        for v in g.value(y) {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn batch_norm_of_one_row_fails_in_train_mode() {
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, 2.0]]);
        let gamma = g.constant(Matrix::ones((1, 2)));
        let beta = g.constant(Matrix::zeros((1, 2)));
        assert!(g.batch_norm_train(x, gamma, beta, 1e-5).is_err());
    }

    #[test]
    fn median_bandwidth_matches_sorted_entries() {
        let mut g = Graph::new();
        let x = g.constant(array![[0.0], [1.0], [3.0]]);
        let d = g.sq_dist(x);
        // upper entries: 1, 9, 4 -> median 4 -> sigma² 2
        let s2 = g.median_bandwidth(d, 1e-12).unwrap();
        assert_eq!(g.scalar(s2), 2.0);
    }

    #[test]
    fn slice_rows_routes_gradient() {
        let mut g = Graph::new();
        let x = g.variable(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let mid = g.slice_rows(x, 1, 3).unwrap();
        assert_eq!(g.value(mid), &array![[3.0, 4.0], [5.0, 6.0]]);
        let loss = g.weighted_sum(mid, array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let grad = g.grad_wrt(loss, &[x]).unwrap();
        assert_eq!(grad[0], array![[0.0, 0.0], [1.0, 2.0], [3.0, 4.0]]);
        assert!(g.slice_rows(x, 2, 2).is_err());
        assert!(g.slice_rows(x, 0, 4).is_err());
    }
}
