//! The four training objectives, recorded onto a caller-owned tape.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{Anchor, ModelError};
use crate::autodiff::{AutodiffError, Axis, Matrix, Tape, Var};
use crate::nn::BoundMlp;

/// Donsker–Varadhan MI loss: `−mean Ω([x, h]) + log mean exp Ω([x_perm, h])`.
/// Its negation is the MI estimate.
pub fn mi_loss(tape: &mut Tape, omega: &BoundMlp, x: Var, h: Var, perm: &[usize]) -> Result<Var, ModelError> {
    let n = tape.value(x).rows();
    if n < 2 {
        return Err(AutodiffError::Domain("MI loss needs at least 2 rows".into()).into());
    }
    if perm.len() != n {
        return Err(ModelError::Data(format!("permutation has {} entries for {n} rows", perm.len())));
    }
    let pos_in = tape.concat_cols(x, h)?;
    let pos = omega.forward(tape, pos_in)?;
    let x_perm = tape.select_rows(x, perm)?;
    let neg_in = tape.concat_cols(x_perm, h)?;
    let neg = omega.forward(tape, neg_in)?;
    let pos_mean = tape.mean(pos, Axis::All)?;
    let lme = tape.log_mean_exp(neg)?;
    Ok(tape.sub(lme, pos_mean)?)
}

/// Pairing of control and treated rows for the gradient penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyPlan {
    pub control: Vec<usize>,
    pub treated: Vec<usize>,
    /// Interpolation weight toward the treated point, one per pair.
    pub eps: Vec<f64>,
}

impl PenaltyPlan {
    /// Pairs `min(n0, n1)` rows of each group drawn without replacement,
    /// with `eps ~ U(0, 1)` per pair.
    pub fn sample<R: Rng>(t: &[u8], rng: &mut R) -> Result<Self, ModelError> {
        let (mut control, mut treated) = split_groups(t)?;
        control.shuffle(rng);
        treated.shuffle(rng);
        let m = control.len().min(treated.len());
        control.truncate(m);
        treated.truncate(m);
        let eps = (0..m).map(|_| rng.random::<f64>()).collect();
        Ok(Self { control, treated, eps })
    }

    /// Interpolated points between paired rows of `v`.
    pub fn points(&self, v: &Matrix) -> Matrix {
        Matrix::from_fn(self.eps.len(), v.cols(), |r, c| {
            let e = self.eps[r];
            e * v.get(self.treated[r], c) + (1.0 - e) * v.get(self.control[r], c)
        })
    }
}

pub(crate) fn split_groups(t: &[u8]) -> Result<(Vec<usize>, Vec<usize>), ModelError> {
    let control: Vec<usize> = (0..t.len()).filter(|&i| t[i] == 0).collect();
    let treated: Vec<usize> = (0..t.len()).filter(|&i| t[i] == 1).collect();
    if control.is_empty() || treated.is_empty() {
        return Err(ModelError::Balance("batch contains a single treatment group".into()));
    }
    Ok((control, treated))
}

/// `−E_anchor D([z, h]) + E_other D([z, h])`.
pub fn critic_group_terms(
    tape: &mut Tape,
    disc: &BoundMlp,
    h: Var,
    z: Var,
    t: &[u8],
    anchor: Anchor,
) -> Result<Var, ModelError> {
    let (control, treated) = split_groups(t)?;
    let v = tape.concat_cols(z, h)?;
    let scores = disc.forward(tape, v)?;
    let c = tape.select_rows(scores, &control)?;
    let c = tape.mean(c, Axis::All)?;
    let tr = tape.select_rows(scores, &treated)?;
    let tr = tape.mean(tr, Axis::All)?;
    Ok(match anchor {
        Anchor::Control => tape.sub(tr, c)?,
        Anchor::Treated => tape.sub(c, tr)?,
    })
}

/// `β · mean((‖∇ D(p)‖ − 1)²)` over the rows of `points`.
pub fn gradient_penalty(tape: &mut Tape, disc: &BoundMlp, points: Var, beta: f64) -> Result<Var, ModelError> {
    let g = disc.input_gradient(tape, points)?;
    let sq = tape.square(g);
    let norm_sq = tape.sum(sq, Axis::Cols)?;
    let norm = tape.sqrt(norm_sq)?;
    let dev = tape.add_scalar(norm, -1.0);
    let dev_sq = tape.square(dev);
    let m = tape.mean(dev_sq, Axis::All)?;
    Ok(tape.scale(m, beta))
}

/// Critic loss: group terms plus the gradient penalty at the plan's
/// interpolates. The interpolates enter as constants.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_loss(
    tape: &mut Tape,
    disc: &BoundMlp,
    h: Var,
    z: Var,
    t: &[u8],
    anchor: Anchor,
    plan: &PenaltyPlan,
    beta: f64,
) -> Result<Var, ModelError> {
    let group = critic_group_terms(tape, disc, h, z, t, anchor)?;
    let zh = tape.value(z).concat_cols(tape.value(h))?;
    let points = tape.constant(plan.points(&zh));
    let pen = gradient_penalty(tape, disc, points, beta)?;
    Ok(tape.add(group, pen)?)
}

/// Encoder's adversarial loss, the negated group terms.
pub fn encoder_adversarial_loss(
    tape: &mut Tape,
    disc: &BoundMlp,
    h: Var,
    z: Var,
    t: &[u8],
    anchor: Anchor,
) -> Result<Var, ModelError> {
    let group = critic_group_terms(tape, disc, h, z, t, anchor)?;
    Ok(tape.neg(group))
}

/// Factual squared error through the per-arm heads, averaged over all rows,
/// plus `lambda` times the heads' squared weights.
pub fn outcome_loss(
    tape: &mut Tape,
    heads: [&BoundMlp; 2],
    h: Var,
    t: &[u8],
    y: &[f64],
    lambda: f64,
) -> Result<Var, ModelError> {
    let n = tape.value(h).rows();
    if t.len() != n || y.len() != n {
        return Err(AutodiffError::Length {
            expected: n,
            got: if t.len() != n { t.len() } else { y.len() },
        }
        .into());
    }
    let mut total: Option<Var> = None;
    for (arm, head) in heads.iter().enumerate() {
        let rows: Vec<usize> = (0..n).filter(|&i| usize::from(t[i]) == arm).collect();
        if rows.is_empty() {
            continue;
        }
        let h_arm = tape.select_rows(h, &rows)?;
        let pred = head.forward(tape, h_arm)?;
        let target = tape.constant(Matrix::column(&rows.iter().map(|&i| y[i]).collect::<Vec<_>>()));
        let resid = tape.sub(pred, target)?;
        let sq = tape.square(resid);
        let s = tape.sum(sq, Axis::All)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let sse = total.ok_or_else(|| ModelError::Data("outcome loss on an empty batch".into()))?;
    let mse = tape.scale(sse, 1.0 / n as f64);
    let r0 = heads[0].l2_penalty(tape)?;
    let r1 = heads[1].l2_penalty(tape)?;
    let r = tape.add(r0, r1)?;
    let r = tape.scale(r, lambda);
    Ok(tape.add(mse, r)?)
}
