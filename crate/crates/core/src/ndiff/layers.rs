use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Matrix, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Fully connected layer `y = x Wᵀ + b`, Glorot-uniform weights, zero bias.
#[derive(Debug, Clone)]
pub struct AffineLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl AffineLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = Matrix::from_shape_fn((out_dim, in_dim), |_| rng.random_range(-limit..=limit));
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Matrix::zeros((1, out_dim)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.affine(x, w, b)
    }
}

/// 1-D batch normalisation with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, features: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Matrix::ones((1, features)));
        let beta = store.add(format!("{name}.beta"), Matrix::zeros((1, features)));
        Self {
            name: name.to_string(),
            gamma,
            beta,
            running_mean: Array1::zeros(features),
            running_var: Array1::ones(features),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// In train mode normalises with batch statistics and folds them into the
    /// running estimates (unbiased variance, exponential averaging).
    pub fn forward(
        &mut self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        match mode {
            Mode::Train => self.forward_train(g, store, x),
            Mode::Eval => self.forward_eval(g, store, x),
        }
    }

    pub fn forward_train(&mut self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = g.value(x).nrows();
        if n < 2 {
            return Err(Error::shape(format!(
                "{}: train-mode batch norm needs at least 2 rows",
                self.name
            )));
        }
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let (out, mean, var) = g.batch_norm_train(x, gamma, beta, self.eps)?;
        let unbiased = var * (n as f64 / (n as f64 - 1.0));
        let m = self.momentum;
        self.running_mean = &self.running_mean * (1.0 - m) + mean * m;
        self.running_var = &self.running_var * (1.0 - m) + unbiased * m;
        Ok(out)
    }

    pub fn forward_eval(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.batch_norm_eval(
            x,
            gamma,
            beta,
            &self.running_mean,
            &self.running_var,
            self.eps,
        )
    }
}
