use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{ensure, Result};

/// How a tensor is initialized.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    Zeros,
    Constant(f64),
    Normal(f64),
}

/// Named tensors in a fixed order. The order is part of the checkpoint
/// format, so it is only ever built by appending.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub(crate) fn push(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let n = rows * cols;
        let data = match init {
            Init::Xavier => {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Constant(v) => vec![v; n],
            Init::Normal(s) => (0..n)
                .map(|_| s * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        };
        self.names.push(name.into());
        self.tensors.push(Tensor::raw(vec![rows, cols], data));
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor, checking shapes.
    pub fn assign(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        ensure!(
            tensors.len() == self.tensors.len(),
            Dimension,
            "expected {} tensors, got {}",
            self.tensors.len(),
            tensors.len()
        );
        for (i, (old, new)) in self.tensors.iter().zip(&tensors).enumerate() {
            ensure!(
                old.dims() == new.dims(),
                Dimension,
                "{}: expected {:?}, got {:?}",
                self.names[i],
                old.dims(),
                new.dims()
            );
        }
        self.tensors = tensors;
        Ok(())
    }

    /// Puts every tensor on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    pub fn gradients(vars: &[Var], grads: &Gradients) -> Vec<Tensor> {
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}
