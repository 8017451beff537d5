//! ABCEI: an encoder trained jointly against a mutual-information critic,
//! a Wasserstein group discriminator and two outcome heads.
//!
//! Each mini-batch runs four update lines in order: (1) encoder and MI
//! critic on the MI loss, (2) `disc_steps` critic updates, (3) one encoder
//! update against the frozen critic, (4) encoder and heads on the outcome
//! loss. Each network owns one Adam state, shared by every line that
//! updates it, and every update records a fresh forward pass on its own
//! tape.

mod config;
pub mod losses;
mod mine;
mod probe;

use std::io::Write;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Matrix, Tape, Var};
use crate::data::Dataset;
use crate::eval::CatePrediction;
use crate::nn::{AdamState, BoundMlp, MlpGrads, MlpParams, NnError};

pub use config::{ablate, AbceiConfig, AbceiVariant, Anchor, EarlyStop, OptimizerKind};
pub use losses::PenaltyPlan;
pub use mine::DvEstimator;
pub use probe::balance_probe;

const MAX_BATCH_REDRAWS: usize = 10;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("treatment balance: {0}")]
    Balance(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl ModelError {
    fn is_divergence(&self) -> bool {
        matches!(
            self,
            ModelError::Nn(NnError::NonFiniteGradient { .. }) | ModelError::Diverged { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mi,
    Discriminator,
    Adversarial,
    Outcome,
}

impl LossKind {
    /// Networks whose parameters this loss updates:
    /// `[encoder, omega, disc, head0, head1]`.
    fn trainable(self) -> [bool; 5] {
        match self {
            LossKind::Mi => [true, true, false, false, false],
            LossKind::Discriminator => [false, false, true, false, false],
            LossKind::Adversarial => [true, false, false, false, false],
            LossKind::Outcome => [true, false, false, true, true],
        }
    }
}

/// Rows of a training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub t: Vec<u8>,
    pub y: Vec<f64>,
}

impl Batch {
    pub fn from_dataset(ds: &Dataset, rows: &[usize]) -> Self {
        Self {
            x: ds.x().select_rows(rows),
            t: rows.iter().map(|&i| ds.t()[i]).collect(),
            y: rows.iter().map(|&i| ds.yf()[i]).collect(),
        }
    }

    pub fn whole(ds: &Dataset) -> Self {
        Self {
            x: ds.x().clone(),
            t: ds.t().to_vec(),
            y: ds.yf().to_vec(),
        }
    }

    pub fn n(&self) -> usize {
        self.t.len()
    }

    pub fn has_both_groups(&self) -> bool {
        self.t.contains(&0) && self.t.contains(&1)
    }
}

/// Random inputs of one loss evaluation: the negative-sample permutation,
/// the critic noise `z` and the penalty pairing (absent for single-group
/// batches).
#[derive(Debug, Clone, PartialEq)]
pub struct LossNoise {
    pub perm: Vec<usize>,
    pub z: Matrix,
    pub plan: Option<PenaltyPlan>,
}

/// Parameter gradients of one loss; `None` for networks the loss does not
/// train.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGradients {
    pub encoder: Option<MlpGrads>,
    pub omega: Option<MlpGrads>,
    pub disc: Option<MlpGrads>,
    pub head0: Option<MlpGrads>,
    pub head1: Option<MlpGrads>,
}

impl NetGradients {
    fn check_finite(&self) -> Result<(), ModelError> {
        let nets = [
            ("encoder", &self.encoder),
            ("omega", &self.omega),
            ("disc", &self.disc),
            ("head0", &self.head0),
            ("head1", &self.head1),
        ];
        for (net, g) in nets {
            let Some(g) = g else { continue };
            for (i, l) in g.layers.iter().enumerate() {
                for (name, m) in [("weight", &l.weight), ("bias", &l.bias)] {
                    if !m.is_finite() {
                        return Err(NnError::NonFiniteGradient {
                            param: format!("{net}.layer{i}.{name}"),
                        }
                        .into());
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Optimizers {
    encoder: AdamState,
    omega: AdamState,
    disc: AdamState,
    head0: AdamState,
    head1: AdamState,
}

/// One row of the training trace. Columns of disabled update lines are 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_mi: f64,
    pub l_d: f64,
    pub l_phi: f64,
    pub l_pred: f64,
    pub val_mse: f64,
    pub mi_estimate: f64,
}

impl EpochRecord {
    fn is_finite(&self) -> bool {
        [self.l_mi, self.l_d, self.l_phi, self.l_pred, self.val_mse, self.mi_estimate]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Epoch-mean training losses.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochLosses {
    pub l_mi: f64,
    pub l_d: f64,
    pub l_phi: f64,
    pub l_pred: f64,
    pub batches: usize,
    /// Batches that skipped the adversarial lines for lack of a group.
    pub skipped_adversarial: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub trace: Vec<EpochRecord>,
    /// Epoch whose parameters were restored (1-based).
    pub best_epoch: usize,
    pub best_score: f64,
    pub stopped_early: bool,
}

pub const TRACE_COLUMNS: [&str; 7] = ["epoch", "l_mi", "l_d", "l_phi", "l_pred", "val_mse", "mi_estimate"];

/// Writes the trace as CSV with the [`TRACE_COLUMNS`] header.
pub fn write_trace_csv<W: Write>(trace: &[EpochRecord], writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TRACE_COLUMNS)?;
    for r in trace {
        w.write_record([
            r.epoch.to_string(),
            r.l_mi.to_string(),
            r.l_d.to_string(),
            r.l_phi.to_string(),
            r.l_pred.to_string(),
            r.val_mse.to_string(),
            r.mi_estimate.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parameters of all five networks plus the config that shaped them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub config: AbceiConfig,
    pub input_dim: usize,
    pub encoder: MlpParams,
    pub omega: MlpParams,
    pub disc: MlpParams,
    pub head0: MlpParams,
    pub head1: MlpParams,
}

#[derive(Debug, Clone)]
pub struct AbceiModel {
    config: AbceiConfig,
    k: usize,
    pub encoder: MlpParams,
    pub omega: MlpParams,
    pub disc: MlpParams,
    pub head0: MlpParams,
    pub head1: MlpParams,
    opt: Optimizers,
    rng: ChaCha8Rng,
    optimizer_steps: u64,
}

struct Bound {
    encoder: BoundMlp,
    omega: BoundMlp,
    disc: BoundMlp,
    head0: BoundMlp,
    head1: BoundMlp,
}

impl AbceiModel {
    /// Fresh model for `k` covariates, initialized from `config.seed`.
    pub fn new(config: AbceiConfig, k: usize) -> Result<Self, ModelError> {
        config.validate()?;
        if k == 0 {
            return Err(ModelError::Config("need at least one covariate".into()));
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = MlpParams::init_with_rng(&config.encoder_spec(k)?, &mut init_rng)?;
        let omega = MlpParams::init_with_rng(&config.mi_spec(k)?, &mut init_rng)?;
        let disc = MlpParams::init_with_rng(&config.disc_spec()?, &mut init_rng)?;
        let head0 = MlpParams::init_with_rng(&config.head_spec()?, &mut init_rng)?;
        let head1 = MlpParams::init_with_rng(&config.head_spec()?, &mut init_rng)?;
        Self::assemble(config, k, encoder, omega, disc, head0, head1)
    }

    fn assemble(
        config: AbceiConfig,
        k: usize,
        encoder: MlpParams,
        omega: MlpParams,
        disc: MlpParams,
        head0: MlpParams,
        head1: MlpParams,
    ) -> Result<Self, ModelError> {
        let d = config.latent_dim;
        let shapes_ok = encoder.input_dim() == k
            && encoder.output_dim() == d
            && omega.input_dim() == k + d
            && omega.output_dim() == 1
            && disc.input_dim() == 2 * d
            && disc.output_dim() == 1
            && [&head0, &head1].iter().all(|h| h.input_dim() == d && h.output_dim() == 1);
        if !shapes_ok {
            return Err(ModelError::Config("network shapes do not match the latent width".into()));
        }
        let adam = config.adam();
        let opt = Optimizers {
            encoder: AdamState::new(adam, &encoder),
            omega: AdamState::new(adam, &omega),
            disc: AdamState::new(adam, &disc),
            head0: AdamState::new(adam, &head0),
            head1: AdamState::new(adam, &head1),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            config,
            k,
            encoder,
            omega,
            disc,
            head0,
            head1,
            opt,
            rng,
            optimizer_steps: 0,
        })
    }

    pub fn config(&self) -> &AbceiConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.k
    }

    /// Total optimizer updates applied so far (one per update line call).
    pub fn optimizer_steps(&self) -> u64 {
        self.optimizer_steps
    }

    fn check_x(&self, x: &Matrix) -> Result<(), ModelError> {
        if x.cols() != self.k {
            return Err(AutodiffError::dimension("encode", x.shape(), (x.rows(), self.k)).into());
        }
        Ok(())
    }

    /// Latent representation of each row.
    pub fn encode(&self, x: &Matrix) -> Result<Matrix, ModelError> {
        self.check_x(x)?;
        Ok(self.encoder.predict(x)?)
    }

    pub fn predict_outcomes(&self, x: &Matrix) -> Result<CatePrediction, ModelError> {
        let h = self.encode(x)?;
        let y0 = self.head0.predict(&h)?.into_data();
        let y1 = self.head1.predict(&h)?.into_data();
        Ok(CatePrediction::from_outcomes(y0, y1))
    }

    /// `Ψ1(Φ(x)) − Ψ0(Φ(x))` per row.
    pub fn predict_cate(&self, x: &Matrix) -> Result<Vec<f64>, ModelError> {
        Ok(self.predict_outcomes(x)?.tau)
    }

    /// Draws a negative-sample permutation, critic noise and penalty
    /// pairing for `batch` from the model's training stream.
    pub fn sample_noise(&mut self, batch: &Batch) -> LossNoise {
        let n = batch.n();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut self.rng);
        let rng = &mut self.rng;
        let z = Matrix::from_fn(n, self.config.latent_dim, |_, _| StandardNormal.sample(rng));
        let plan = PenaltyPlan::sample(&batch.t, &mut self.rng).ok();
        LossNoise { perm, z, plan }
    }

    fn bind(&self, tape: &mut Tape, trainable: [bool; 5]) -> Bound {
        Bound {
            encoder: self.encoder.bind(tape, trainable[0]),
            omega: self.omega.bind(tape, trainable[1]),
            disc: self.disc.bind(tape, trainable[2]),
            head0: self.head0.bind(tape, trainable[3]),
            head1: self.head1.bind(tape, trainable[4]),
        }
    }

    fn record(&self, tape: &mut Tape, kind: LossKind, batch: &Batch, noise: &LossNoise) -> Result<(Var, Bound), ModelError> {
        self.check_x(&batch.x)?;
        if batch.y.len() != batch.n() || batch.x.rows() != batch.n() {
            return Err(ModelError::Data("batch columns have different lengths".into()));
        }
        let b = self.bind(tape, kind.trainable());
        let x = tape.constant(batch.x.clone());
        let h = b.encoder.forward(tape, x)?;
        let c = &self.config;
        let loss = match kind {
            LossKind::Mi => losses::mi_loss(tape, &b.omega, x, h, &noise.perm)?,
            LossKind::Discriminator => {
                let plan = noise
                    .plan
                    .as_ref()
                    .ok_or_else(|| ModelError::Balance("no penalty pairs for a single-group batch".into()))?;
                let z = tape.constant(noise.z.clone());
                losses::discriminator_loss(tape, &b.disc, h, z, &batch.t, c.anchor, plan, c.beta)?
            }
            LossKind::Adversarial => {
                let z = tape.constant(noise.z.clone());
                losses::encoder_adversarial_loss(tape, &b.disc, h, z, &batch.t, c.anchor)?
            }
            LossKind::Outcome => {
                losses::outcome_loss(tape, [&b.head0, &b.head1], h, &batch.t, &batch.y, c.lambda)?
            }
        };
        Ok((loss, b))
    }

    /// Loss value without gradients.
    pub fn loss_value(&self, kind: LossKind, batch: &Batch, noise: &LossNoise) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let (loss, _) = self.record(&mut tape, kind, batch, noise)?;
        Ok(tape.scalar(loss))
    }

    /// Loss value and the gradients of the networks it trains.
    pub fn loss_with_gradients(
        &self,
        kind: LossKind,
        batch: &Batch,
        noise: &LossNoise,
    ) -> Result<(f64, NetGradients), ModelError> {
        let mut tape = Tape::new();
        let (loss, b) = self.record(&mut tape, kind, batch, noise)?;
        let value = tape.scalar(loss);
        let mut g = tape.backward(loss)?;
        let tr = kind.trainable();
        let pick = |on: bool, net: &BoundMlp, g: &mut crate::autodiff::Gradients| on.then(|| net.gradients(&tape, g));
        let grads = NetGradients {
            encoder: pick(tr[0], &b.encoder, &mut g),
            omega: pick(tr[1], &b.omega, &mut g),
            disc: pick(tr[2], &b.disc, &mut g),
            head0: pick(tr[3], &b.head0, &mut g),
            head1: pick(tr[4], &b.head1, &mut g),
        };
        Ok((value, grads))
    }

    /// One optimizer update of the given line. Nothing is modified when
    /// the loss or any gradient is non-finite.
    pub fn step(&mut self, kind: LossKind, batch: &Batch, noise: &LossNoise) -> Result<f64, ModelError> {
        let (value, g) = self.loss_with_gradients(kind, batch, noise)?;
        if !value.is_finite() {
            return Err(ModelError::Diverged {
                epoch: 0,
                reason: format!("{kind:?} loss is {value}"),
            });
        }
        g.check_finite()?;
        let o = &mut self.opt;
        let pairs = [
            (&mut o.encoder, &mut self.encoder, &g.encoder),
            (&mut o.omega, &mut self.omega, &g.omega),
            (&mut o.disc, &mut self.disc, &g.disc),
            (&mut o.head0, &mut self.head0, &g.head0),
            (&mut o.head1, &mut self.head1, &g.head1),
        ];
        for (adam, params, grads) in pairs {
            if let Some(grads) = grads {
                adam.step(params, grads)?;
            }
        }
        self.optimizer_steps += 1;
        Ok(value)
    }

    /// All update lines for one batch. Returns the per-line losses
    /// `(l_mi, l_d mean over critic steps, l_phi, l_pred)`, `None` where a
    /// line did not run.
    pub fn train_batch(&mut self, batch: &Batch) -> Result<[Option<f64>; 4], ModelError> {
        let mut out = [None; 4];
        if self.config.use_mi {
            let noise = self.sample_noise(batch);
            out[0] = Some(self.step(LossKind::Mi, batch, &noise)?);
        }
        if self.config.use_adversarial && batch.has_both_groups() {
            let mut total = 0.0;
            for _ in 0..self.config.disc_steps {
                let noise = self.sample_noise(batch);
                total += self.step(LossKind::Discriminator, batch, &noise)?;
            }
            out[1] = Some(total / self.config.disc_steps as f64);
            let noise = self.sample_noise(batch);
            out[2] = Some(self.step(LossKind::Adversarial, batch, &noise)?);
        }
        let noise = self.sample_noise(batch);
        out[3] = Some(self.step(LossKind::Outcome, batch, &noise)?);
        Ok(out)
    }

    /// One pass over `train` in shuffled mini-batches. A batch holding a
    /// single treatment group is redrawn (up to 10 times) when the
    /// adversarial lines are enabled; if that fails they are skipped.
    pub fn train_epoch(&mut self, train: &Dataset) -> Result<EpochLosses, ModelError> {
        if train.k() != self.k {
            return Err(AutodiffError::dimension("train_epoch", train.x().shape(), (train.n(), self.k)).into());
        }
        let n = train.n();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let mut sums = [0.0; 4];
        let mut counts = [0usize; 4];
        let mut losses = EpochLosses::default();
        for chunk in order.chunks(self.config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut batch = Batch::from_dataset(train, chunk);
            if self.config.use_adversarial && !batch.has_both_groups() {
                for _ in 0..MAX_BATCH_REDRAWS {
                    let rows = sample_indices(&mut self.rng, n, chunk.len()).into_vec();
                    batch = Batch::from_dataset(train, &rows);
                    if batch.has_both_groups() {
                        break;
                    }
                }
                if !batch.has_both_groups() {
                    log::warn!("batch kept a single treatment group after {MAX_BATCH_REDRAWS} redraws; skipping adversarial steps");
                    losses.skipped_adversarial += 1;
                }
            }
            let out = self.train_batch(&batch)?;
            for (j, v) in out.iter().enumerate() {
                if let Some(v) = v {
                    sums[j] += v;
                    counts[j] += 1;
                }
            }
            losses.batches += 1;
        }
        let mean = |j: usize| if counts[j] == 0 { 0.0 } else { sums[j] / counts[j] as f64 };
        losses.l_mi = mean(0);
        losses.l_d = mean(1);
        losses.l_phi = mean(2);
        losses.l_pred = mean(3);
        Ok(losses)
    }

    /// Factual MSE of the heads on `ds`.
    pub fn factual_mse(&self, ds: &Dataset) -> Result<f64, ModelError> {
        let pred = self.predict_outcomes(ds.x())?;
        let sse: f64 = (0..ds.n())
            .map(|i| {
                let p = if ds.t()[i] == 1 { pred.y1[i] } else { pred.y0[i] };
                (p - ds.yf()[i]).powi(2)
            })
            .sum();
        Ok(sse / ds.n() as f64)
    }

    /// MI loss on `ds` with a given negative-sample permutation.
    pub fn mi_loss_on(&self, ds: &Dataset, perm: &[usize]) -> Result<f64, ModelError> {
        let noise = LossNoise {
            perm: perm.to_vec(),
            z: Matrix::zeros(0, 0),
            plan: None,
        };
        self.loss_value(LossKind::Mi, &Batch::whole(ds), &noise)
    }

    /// Trains until `max_epochs` or until the monitored validation quantity
    /// fails to improve for `patience` epochs, then restores the best
    /// parameters. `observer` sees every completed epoch.
    pub fn fit(
        &mut self,
        train: &Dataset,
        val: &Dataset,
        mut observer: impl FnMut(&EpochRecord, &AbceiModel),
    ) -> Result<FitReport, ModelError> {
        if val.n() < 2 {
            return Err(ModelError::Data("validation set needs at least 2 rows".into()));
        }
        let mut val_rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        val_rng.set_stream(2);
        let mut val_perm: Vec<usize> = (0..val.n()).collect();
        val_perm.shuffle(&mut val_rng);

        let mut trace = Vec::new();
        let mut best: Option<(usize, f64, [MlpParams; 5])> = None;
        let mut since_best = 0;
        let mut stopped_early = false;
        for epoch in 1..=self.config.max_epochs {
            let losses = self.train_epoch(train).map_err(|e| match e {
                e if e.is_divergence() => ModelError::Diverged {
                    epoch,
                    reason: e.to_string(),
                },
                e => e,
            })?;
            let val_mse = self.factual_mse(val)?;
            let val_mi = self.mi_loss_on(val, &val_perm)?;
            let record = EpochRecord {
                epoch,
                l_mi: losses.l_mi,
                l_d: losses.l_d,
                l_phi: losses.l_phi,
                l_pred: losses.l_pred,
                val_mse,
                mi_estimate: -val_mi,
            };
            if !record.is_finite() {
                return Err(ModelError::Diverged {
                    epoch,
                    reason: format!("non-finite trace entry {record:?}"),
                });
            }
            observer(&record, self);
            trace.push(record);

            let score = match self.config.early_stop {
                EarlyStop::ValMsePlusMi if self.config.use_mi => val_mse + val_mi,
                _ => val_mse,
            };
            if best.as_ref().is_none_or(|b| score < b.1) {
                best = Some((epoch, score, self.snapshot()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= self.config.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
        let (best_epoch, best_score, params) = best.expect("at least one epoch ran");
        self.restore(params);
        log::debug!("restored epoch {best_epoch} (score {best_score:.6})");
        Ok(FitReport {
            trace,
            best_epoch,
            best_score,
            stopped_early,
        })
    }

    fn snapshot(&self) -> [MlpParams; 5] {
        [
            self.encoder.clone(),
            self.omega.clone(),
            self.disc.clone(),
            self.head0.clone(),
            self.head1.clone(),
        ]
    }

    fn restore(&mut self, [encoder, omega, disc, head0, head1]: [MlpParams; 5]) {
        self.encoder = encoder;
        self.omega = omega;
        self.disc = disc;
        self.head0 = head0;
        self.head1 = head1;
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            config: self.config.clone(),
            input_dim: self.k,
            encoder: self.encoder.clone(),
            omega: self.omega.clone(),
            disc: self.disc.clone(),
            head0: self.head0.clone(),
            head1: self.head1.clone(),
        }
    }

    /// Restores parameters; optimizer moments and the noise stream start
    /// fresh.
    pub fn from_checkpoint(cp: ModelCheckpoint) -> Result<Self, ModelError> {
        cp.config.validate()?;
        Self::assemble(cp.config, cp.input_dim, cp.encoder, cp.omega, cp.disc, cp.head0, cp.head1)
    }
}

#[cfg(test)]
mod tests;
