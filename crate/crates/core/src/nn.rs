//! Feed-forward networks: specification, parameters, tape binding and Adam.
//!
//! Every network in the crate is an affine stack with ELU between layers
//! and a linear output. Parameters live outside the tape as [`MlpParams`];
//! each optimization step binds them onto a fresh [`Tape`], runs a loss,
//! extracts [`MlpGrads`] and applies an [`AdamState`] update.
//!
//! Checkpoint layout (JSON): `{"layers": [{"name": "layer0", "weight":
//! {"rows": r, "cols": c, "data": [...]}, "bias": {...}}, ...]}` with
//! row-major data, weights `fan_in × fan_out`, biases `1 × fan_out`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    elu, forward_with_preactivations, mlp_input_gradient, AutodiffError, Axis, Gradients, LayerVars,
    Matrix, Tape, Var,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("non-finite gradient in {param}")]
    NonFiniteGradient { param: String },
    #[error("gradient shape {got:?} does not match parameter {param} {expected:?}")]
    GradientShape {
        param: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HiddenActivation {
    #[default]
    Elu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    #[default]
    Linear,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub hidden_activation: HiddenActivation,
    #[serde(default)]
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, output_dim: usize) -> Result<Self, NnError> {
        let spec = Self {
            input_dim,
            hidden_widths,
            output_dim,
            hidden_activation: HiddenActivation::Elu,
            output_activation: OutputActivation::Linear,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_widths.contains(&0) {
            return Err(NnError::Spec(format!("all widths must be >= 1: {self:?}")));
        }
        Ok(())
    }

    pub fn layer_count(&self) -> usize {
        self.hidden_widths.len() + 1
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.layer_count());
        let mut fan_in = self.input_dim;
        for &w in self.hidden_widths.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Matrix,
}

/// Parameters of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Checkpoint", try_from = "Checkpoint")]
pub struct MlpParams {
    layers: Vec<Layer>,
}

#[derive(Serialize, Deserialize)]
struct NamedLayer {
    name: String,
    weight: Matrix,
    bias: Matrix,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    layers: Vec<NamedLayer>,
}

impl From<MlpParams> for Checkpoint {
    fn from(p: MlpParams) -> Self {
        Checkpoint {
            layers: p
                .layers
                .into_iter()
                .enumerate()
                .map(|(i, l)| NamedLayer {
                    name: format!("layer{i}"),
                    weight: l.weight,
                    bias: l.bias,
                })
                .collect(),
        }
    }
}

impl TryFrom<Checkpoint> for MlpParams {
    type Error = NnError;

    fn try_from(c: Checkpoint) -> Result<Self, Self::Error> {
        MlpParams::from_layers(
            c.layers
                .into_iter()
                .map(|l| Layer {
                    weight: l.weight,
                    bias: l.bias,
                })
                .collect(),
        )
    }
}

impl MlpParams {
    /// Glorot-variance normal weights, zero biases; deterministic in `seed`.
    pub fn init(spec: &MlpSpec, seed: u64) -> Result<Self, NnError> {
        Self::init_with_rng(spec, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn init_with_rng<R: Rng>(spec: &MlpSpec, rng: &mut R) -> Result<Self, NnError> {
        spec.validate()?;
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let sd = (2.0 / (fan_in + fan_out) as f64).sqrt();
                let normal = Normal::new(0.0, sd).expect("positive standard deviation");
                Layer {
                    weight: Matrix::from_fn(fan_in, fan_out, |_, _| normal.sample(rng)),
                    bias: Matrix::zeros(1, fan_out),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(spec: &MlpSpec) -> Result<Self, NnError> {
        spec.validate()?;
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(i, o)| Layer {
                weight: Matrix::zeros(i, o),
                bias: Matrix::zeros(1, o),
            })
            .collect();
        Ok(Self { layers })
    }

    /// Validates that shapes chain and biases are rows.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::Spec("network has no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.shape() != (1, l.weight.cols()) {
                return Err(NnError::Spec(format!(
                    "layer{i}: bias {:?} does not match weight {:?}",
                    l.bias.shape(),
                    l.weight.shape()
                )));
            }
            if i > 0 && layers[i - 1].weight.cols() != l.weight.rows() {
                return Err(NnError::Spec(format!("layer{i}: fan-in does not chain")));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.cols()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Records the parameters as tape leaves. With `trainable == false` they
    /// enter as constants and receive no gradient.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                weight: tape.leaf(l.weight.clone(), trainable),
                bias: tape.leaf(l.bias.clone(), trainable),
            })
            .collect();
        BoundMlp { layers }
    }

    /// Tape-free forward pass.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix, NnError> {
        let mut act = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            act = act.matmul(&l.weight)?;
            act = act.add_row(&l.bias);
            if i < last {
                act = act.map(elu);
            }
        }
        Ok(act)
    }

    /// Sum of squared weight entries (biases excluded).
    pub fn l2(&self) -> f64 {
        self.layers.iter().map(|l| l.weight.norm_sq()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.is_finite())
    }
}

/// Parameters bound onto one tape.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    pub layers: Vec<LayerVars>,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, NnError> {
        let expected = tape.value(self.layers[0].weight).rows();
        let got = tape.value(x).cols();
        if expected != got {
            return Err(AutodiffError::dimension("forward", tape.value(x).shape(), (got, expected)).into());
        }
        Ok(forward_with_preactivations(tape, &self.layers, x)?.0)
    }

    /// Per-row gradient of the scalar output with respect to the input.
    pub fn input_gradient(&self, tape: &mut Tape, x: Var) -> Result<Var, NnError> {
        Ok(mlp_input_gradient(tape, &self.layers, x)?)
    }

    /// Sum of squared weights as a `1 × 1` node.
    pub fn l2_penalty(&self, tape: &mut Tape) -> Result<Var, NnError> {
        let mut total: Option<Var> = None;
        for l in &self.layers {
            let sq = tape.square(l.weight);
            let s = tape.sum(sq, Axis::All)?;
            total = Some(match total {
                Some(t) => tape.add(t, s)?,
                None => s,
            });
        }
        total.ok_or_else(|| NnError::Spec("network has no layers".into()))
    }

    /// Pulls this network's parameter gradients out of a backward result.
    /// Layers bound as constants yield zeros.
    pub fn gradients(&self, tape: &Tape, grads: &mut Gradients) -> MlpGrads {
        let pick = |grads: &mut Gradients, v: Var| {
            grads.take(v).unwrap_or_else(|| {
                let m = tape.value(v);
                Matrix::zeros(m.rows(), m.cols())
            })
        };
        MlpGrads {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: pick(grads, l.weight),
                    bias: pick(grads, l.bias),
                })
                .collect(),
        }
    }
}

/// Gradient container mirroring [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for one network.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Layer>,
    v: Vec<Layer>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &MlpParams) -> Self {
        let zeros = || {
            params
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: Matrix::zeros(1, l.bias.cols()),
                })
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Gradients are validated before anything is
    /// mutated, so a rejected step leaves parameters and moments intact.
    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpGrads) -> Result<(), NnError> {
        if grads.layers.len() != params.layers.len() {
            return Err(NnError::Spec(format!(
                "{} gradient layers for {} parameter layers",
                grads.layers.len(),
                params.layers.len()
            )));
        }
        for (i, (p, g)) in params.layers.iter().zip(&grads.layers).enumerate() {
            for (name, pm, gm) in [("weight", &p.weight, &g.weight), ("bias", &p.bias, &g.bias)] {
                let param = format!("layer{i}.{name}");
                if pm.shape() != gm.shape() {
                    return Err(NnError::GradientShape {
                        param,
                        expected: pm.shape(),
                        got: gm.shape(),
                    });
                }
                if !gm.is_finite() {
                    return Err(NnError::NonFiniteGradient { param });
                }
            }
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let update = |theta: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
            for j in 0..theta.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                theta[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        };
        for (((p, g), m), v) in params
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            update(
                p.weight.data_mut(),
                m.weight.data_mut(),
                v.weight.data_mut(),
                g.weight.data(),
            );
            update(p.bias.data_mut(), m.bias.data_mut(), v.bias.data_mut(), g.bias.data());
        }
        Ok(())
    }
}
