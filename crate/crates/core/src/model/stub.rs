use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::maps::CaVar;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Closed-form attention: `A[f, n, :] = softmax(z[f, :, n] W + b[n, :])`
/// over tokens, with one attention pixel per latent pixel.
///
/// Its gradient is easy to derive by hand, which makes it the reference
/// substrate for checking the guidance losses.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearAttentionStub {
    /// `[C, L]`
    pub weight: Tensor,
    /// `[N, L]`
    pub bias: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
    pub token_offset: usize,
}

impl LinearAttentionStub {
    pub fn new(weight: Tensor, bias: Tensor, grid_h: usize, grid_w: usize, token_offset: usize) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [grid_h * grid_w, weight.shape()[1]] {
            return Err(Error::dim("linear_attention_stub", weight.shape(), bias.shape()));
        }
        Ok(Self {
            weight,
            bias,
            grid_h,
            grid_w,
            token_offset,
        })
    }

    /// Gaussian weights and biases with standard deviation `scale`.
    pub fn random(channels: usize, grid_h: usize, grid_w: usize, tokens: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            weight: Tensor::randn(&[channels, tokens], scale, &mut rng),
            bias: Tensor::randn(&[grid_h * grid_w, tokens], scale, &mut rng),
            grid_h,
            grid_w,
            token_offset: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Pre-softmax logits `[F, N, L]` for `z: [F, C, grid_h, grid_w]`.
    pub fn logits<'t>(&self, z: Var<'t>) -> Result<Var<'t>> {
        let shape = z.shape();
        let n = self.grid_h * self.grid_w;
        if shape.len() != 4 || shape[1] != self.channels() || shape[2] * shape[3] != n {
            return Err(Error::dim(
                "linear_attention_stub",
                &shape,
                &[self.channels(), self.grid_h, self.grid_w],
            ));
        }
        let (f, c, l) = (shape[0], shape[1], self.tokens());
        let tape = z.tape();
        z.reshape(&[f, c, n])?
            .permute(&[0, 2, 1])?
            .reshape(&[f * n, c])?
            .matmul(tape.constant(self.weight.clone()))?
            .reshape(&[f, n, l])?
            .add(tape.constant(self.bias.clone()))
    }

    pub fn attention<'t>(&self, z: Var<'t>) -> Result<CaVar<'t>> {
        Ok(CaVar {
            maps: self.logits(z)?.softmax_lastdim()?,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            token_offset: self.token_offset,
        })
    }

    /// Attention for a plain tensor, without tracking gradients.
    pub fn eval(&self, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.attention(tape.constant(z.clone()))?.maps.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_parameters_give_uniform_attention() {
        let stub = LinearAttentionStub::new(Tensor::zeros(&[3, 5]), Tensor::zeros(&[4, 5]), 2, 2, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = stub.eval(&Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng)).unwrap();
        assert!(a.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn logits_are_linear_in_z_without_bias() {
        let mut stub = LinearAttentionStub::random(2, 3, 3, 4, 0.7, 5);
        stub.bias = Tensor::zeros(stub.bias.shape());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Tensor::randn(&[1, 2, 3, 3], 1.0, &mut rng);
        let tape = Tape::new();
        let base = stub.logits(tape.constant(z.clone())).unwrap().value();
        let scaled = stub.logits(tape.constant(z.scale(2.5))).unwrap().value();
        assert!(scaled.max_abs_diff(&base.scale(2.5)).unwrap() < 1e-12);
    }

    #[test]
    fn rows_are_distributions() {
        let stub = LinearAttentionStub::random(2, 2, 3, 6, 1.5, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = stub.eval(&Tensor::randn(&[3, 2, 2, 3], 1.0, &mut rng)).unwrap();
        for row in a.data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn shape_mismatch() {
        let stub = LinearAttentionStub::random(2, 2, 2, 3, 1.0, 0);
        let tape = Tape::new();
        assert!(stub.logits(tape.constant(Tensor::zeros(&[1, 3, 2, 2]))).is_err());
    }
}
