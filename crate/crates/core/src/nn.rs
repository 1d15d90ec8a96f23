//! Affine and two-layer feed-forward blocks over the tape.

use rand::Rng;

use crate::error::Result;
use crate::numkernel::{ParamId, ParamSet, Tape, Tensor, Var};

/// `x·W + b` with `W: in×out`, `b: 1×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Gaussian weights with standard deviation `gain / √in`, zero bias.
    pub fn gaussian<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let w = Tensor::randn(in_dim, out_dim, gain / (in_dim as f64).sqrt(), rng);
        Self::from_tensors(params, name, w, Tensor::zeros(1, out_dim))
    }

    /// Uniform weights in `[-bound, bound)`, zero bias.
    pub fn uniform<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bound: f64,
        rng: &mut R,
    ) -> Self {
        let w = Tensor::uniform(in_dim, out_dim, bound, rng);
        Self::from_tensors(params, name, w, Tensor::zeros(1, out_dim))
    }

    pub fn from_tensors(params: &mut ParamSet, name: &str, weight: Tensor, bias: Tensor) -> Self {
        let (in_dim, out_dim) = (weight.rows(), weight.cols());
        assert_eq!(bias.shape(), &[1, out_dim]);
        Self {
            weight: params.add(format!("{name}.weight"), weight),
            bias: params.add(format!("{name}.bias"), bias),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }

    /// Frozen forward on plain tensors.
    pub fn apply(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, params, xv)?;
        Ok(tape.value(y).clone())
    }
}

/// `relu(x·W₁ + b₁)·W₂ + b₂`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        hidden: usize,
        out_gain: f64,
        rng: &mut R,
    ) -> Self {
        let up = Linear::gaussian(params, &format!("{name}.up"), dim, hidden, 2f64.sqrt(), rng);
        let down = Linear::gaussian(params, &format!("{name}.down"), hidden, dim, out_gain, rng);
        Self { up, down }
    }

    pub fn hidden(&self) -> usize {
        self.up.out_dim
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, params, x)?;
        let h = tape.relu(h);
        self.down.forward(tape, params, h)
    }

    /// Sets every weight and bias of the block to zero.
    pub fn zero(&self, params: &mut ParamSet) {
        for id in [self.up.weight, self.up.bias, self.down.weight, self.down.bias] {
            params.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}
