//! Parameter storage and the small layers shared by every block.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Uniform in `[-a, a]` with `a = sqrt(1 / fan_in)`.
    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let a = (1.0 / fan_in.max(1) as f64).sqrt();
        let value = Tensor::from_fn(shape, |_| rng.random_range(-a..=a));
        self.add(name, value)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Registers every tensor on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding {
            vars: self.values.iter().map(|v| tape.param(v.clone())).collect(),
        }
    }
}

/// Tape handles for the parameters of one forward pass.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Uses tape leaves created elsewhere, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Affine map `x · W + b` over the rows of a matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_width: usize,
    pub out_width: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_width: usize, out_width: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let weight = store.uniform(format!("{name}.weight"), &[in_width, out_width], in_width, rng);
        let bias = bias.then(|| store.zeros(format!("{name}.bias"), &[out_width]));
        Linear {
            weight,
            bias,
            in_width,
            out_width,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        tape.linear(x, params.var(self.weight), self.bias.map(|b| params.var(b)))
    }

    /// Value-only evaluation on a plain matrix.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(store.get(self.weight))?;
        match self.bias {
            Some(b) => y.add_row(store.get(b)),
            None => Ok(y),
        }
    }
}

/// Standardization layer with learned scale and shift.
///
/// In training it normalizes with the statistics of the current batch; in
/// evaluation it uses running averages of those statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub width: usize,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running mean and variance of one [`BatchNorm`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(width: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[width]),
            var: Tensor::full(&[width], 1.0),
        }
    }

    pub fn update(&mut self, batch_mean: &Tensor, batch_var: &Tensor) {
        let m = BN_MOMENTUM;
        for (r, b) in self.mean.data_mut().iter_mut().zip(batch_mean.data()) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.var.data_mut().iter_mut().zip(batch_var.data()) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// Batch moments observed by a training-mode forward.
#[derive(Clone, Debug)]
pub struct BatchMoments {
    pub mean: Tensor,
    pub var: Tensor,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[width], 1.0));
        let beta = store.zeros(format!("{name}.beta"), &[width]);
        BatchNorm { gamma, beta, width }
    }

    /// Training mode: normalizes with batch moments and returns them.
    pub fn forward_train(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<(Var, BatchMoments)> {
        let (xhat, mean, var) = tape.standardize_columns(x, BN_EPS)?;
        let scaled = tape.mul_row(xhat, params.var(self.gamma))?;
        let y = tape.add_row(scaled, params.var(self.beta))?;
        Ok((y, BatchMoments { mean, var }))
    }

    /// Evaluation mode with fixed running statistics.
    pub fn forward_eval(&self, tape: &mut Tape, params: &Binding, x: Var, stats: &RunningStats) -> Result<Var> {
        let inv = stats.var.map(|v| 1.0 / (v + BN_EPS).sqrt());
        let shift = stats.mean.mul(&inv)?.scale(-1.0);
        let inv = tape.constant(inv);
        let shift = tape.constant(shift);
        let xhat = tape.mul_row(x, inv)?;
        let xhat = tape.add_row(xhat, shift)?;
        let scaled = tape.mul_row(xhat, params.var(self.gamma))?;
        tape.add_row(scaled, params.var(self.beta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_init_respects_bound_and_seed() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut s = ParamStore::new();
            s.uniform("w", &[16, 4], 16, &mut rng);
            s
        };
        let s = build();
        assert!(s.values()[0].data().iter().all(|v| v.abs() <= 0.25));
        assert_eq!(s, build());
    }

    #[test]
    fn batchnorm_eval_with_train_moments_matches_train() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3);
        store.get_mut(bn.gamma).data_mut().copy_from_slice(&[1.5, 0.5, -1.0]);
        let x = Tensor::from_fn(&[5, 3], |_| rng.random_range(-2.0..2.0));
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let (y, moments) = bn.forward_train(&mut tape, &b, xv).unwrap();
        let stats = RunningStats {
            mean: moments.mean,
            var: moments.var,
        };
        let y2 = bn.forward_eval(&mut tape, &b, xv, &stats).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(y2)) < 1e-12);
    }
}
