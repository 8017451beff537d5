use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{losses, ModelError};
use crate::autodiff::{Matrix, Tape};
use crate::nn::{AdamConfig, AdamState, MlpParams, MlpSpec};

/// Neural Donsker–Varadhan estimator of `I(X; Y)` from paired samples,
/// using the same critic loss as the model's MI line.
#[derive(Debug, Clone)]
pub struct DvEstimator {
    pub critic: MlpParams,
    adam: AdamState,
    rng: ChaCha8Rng,
}

impl DvEstimator {
    pub fn new(x_dim: usize, y_dim: usize, hidden: Vec<usize>, adam: AdamConfig, seed: u64) -> Result<Self, ModelError> {
        let critic = MlpParams::init(&MlpSpec::new(x_dim + y_dim, hidden, 1)?, seed)?;
        let adam = AdamState::new(adam, &critic);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Self { critic, adam, rng })
    }

    pub fn random_perm(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut self.rng);
        p
    }

    /// DV estimate with negatives `[x[perm], y]`.
    pub fn estimate(&self, x: &Matrix, y: &Matrix, perm: &[usize]) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let omega = self.critic.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let loss = losses::mi_loss(&mut tape, &omega, xv, yv, perm)?;
        Ok(-tape.scalar(loss))
    }

    /// One Adam update on a fresh permutation; returns the estimate before
    /// the update.
    pub fn step(&mut self, x: &Matrix, y: &Matrix) -> Result<f64, ModelError> {
        let perm = self.random_perm(x.rows());
        let mut tape = Tape::new();
        let omega = self.critic.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let loss = losses::mi_loss(&mut tape, &omega, xv, yv, &perm)?;
        let value = -tape.scalar(loss);
        let mut g = tape.backward(loss)?;
        let grads = omega.gradients(&tape, &mut g);
        self.adam.step(&mut self.critic, &grads)?;
        Ok(value)
    }
}
