//! Training objectives: ERM, CORAL and Mixup.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::domains::DomainBatch;
use crate::error::{Error, Result};
use crate::nn::{ForwardPass, GatedModel};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

fn default_coral_lambda() -> f64 {
    1.0
}

fn default_beta_param() -> f64 {
    0.2
}

/// Loss minimized while training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum PretrainLoss {
    /// Mean cross-entropy over the pooled batch.
    Erm {},
    /// ERM plus `lambda` times the mean pairwise covariance distance of
    /// penultimate features, each pair divided by `4 d^2`.
    Coral {
        #[serde(default = "default_coral_lambda")]
        lambda: f64,
    },
    /// Convex input mixing across domain pairs with `lambda ~ Beta(a, a)`.
    Mixup {
        #[serde(default = "default_beta_param")]
        beta_param: f64,
        /// Overrides the sampled mixing weight.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fixed_lambda: Option<f64>,
    },
}

impl Default for PretrainLoss {
    fn default() -> Self {
        PretrainLoss::Erm {}
    }
}

impl PretrainLoss {
    pub fn name(&self) -> &'static str {
        match self {
            PretrainLoss::Erm {} => "erm",
            PretrainLoss::Coral { .. } => "coral",
            PretrainLoss::Mixup { .. } => "mixup",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            PretrainLoss::Erm {} => Ok(()),
            PretrainLoss::Coral { lambda } if lambda.is_finite() && lambda >= 0.0 => Ok(()),
            PretrainLoss::Coral { lambda } => Err(Error::Config(format!("CORAL lambda must be >= 0, got {lambda}"))),
            PretrainLoss::Mixup { beta_param, fixed_lambda } => {
                if !(beta_param.is_finite() && beta_param > 0.0) {
                    return Err(Error::Config(format!("Mixup beta parameter must be > 0, got {beta_param}")));
                }
                if let Some(l) = fixed_lambda {
                    if !(0.0..=1.0).contains(&l) {
                        return Err(Error::Config(format!("Mixup lambda must lie in [0, 1], got {l}")));
                    }
                }
                Ok(())
            }
        }
    }
}

/// Pooled cross-entropy on `batch`.
pub fn erm_loss<S: Scalar>(tape: &mut Tape<S>, model: &GatedModel<S>, batch: &DomainBatch<S>) -> Result<(Var, ForwardPass)> {
    let x = tape.constant(batch.images.clone());
    let fwd = model.forward_on_tape(tape, x)?;
    let loss = tape.softmax_cross_entropy(fwd.logits, &batch.labels)?;
    Ok((loss, fwd))
}

/// Mean over domain pairs of `||C_i - C_j||_F^2 / (4 d^2)` where `C_i` is the
/// covariance of the rows of `features` belonging to domain `i`.
pub fn coral_penalty<S: Scalar>(tape: &mut Tape<S>, features: Var, groups: &[Vec<usize>]) -> Result<Var> {
    if groups.len() < 2 {
        return Err(Error::TooFewInputs {
            op: "coral_penalty",
            min: 2,
            got: groups.len(),
        });
    }
    let d = *tape
        .shape(features)
        .get(1)
        .ok_or_else(|| Error::shape("coral_penalty", "features must be [n, d]", tape.shape(features), &[]))?;
    let covs = groups
        .iter()
        .map(|rows| {
            let f = tape.select_rows(features, rows)?;
            tape.covariance(f)
        })
        .collect::<Result<Vec<_>>>()?;
    let norm = S::one() / S::of(4.0 * (d * d) as f64);
    let mut pairs = Vec::new();
    for i in 0..covs.len() {
        for j in i + 1..covs.len() {
            let dist = tape.squared_distance(covs[i], covs[j])?;
            pairs.push(tape.scale(dist, norm)?);
        }
    }
    tape.mean(&pairs)
}

/// ERM plus `lambda` times the CORAL penalty.
pub fn coral_loss<S: Scalar>(
    tape: &mut Tape<S>,
    model: &GatedModel<S>,
    batch: &DomainBatch<S>,
    lambda: f64,
) -> Result<(Var, ForwardPass)> {
    let groups: Vec<Vec<usize>> = batch.domain_rows()?.into_iter().map(|(_, rows)| rows).collect();
    let (ce, fwd) = erm_loss(tape, model, batch)?;
    let penalty = coral_penalty(tape, fwd.features, &groups)?;
    let loss = tape.lin_comb(&[ce, penalty], &[S::one(), S::of(lambda)])?;
    Ok((loss, fwd))
}

/// A mixed batch: `images = lambda * x_a + (1 - lambda) * x_b`.
#[derive(Clone, Debug)]
pub struct MixedBatch<S> {
    pub images: Tensor<S>,
    pub labels_a: Vec<usize>,
    pub labels_b: Vec<usize>,
    pub lambda: S,
}

/// Pairs row `j` of each domain group with row `j` of the next group, cyclically.
pub fn mix_batch<S: Scalar>(batch: &DomainBatch<S>, lambda: S) -> Result<MixedBatch<S>> {
    let groups: Vec<Vec<usize>> = batch.domain_rows()?.into_iter().map(|(_, rows)| rows).collect();
    let row_len: usize = batch.images.shape()[1..].iter().product();
    let src = batch.images.values();
    let mut images = Vec::with_capacity(src.len());
    let mut labels_a = Vec::with_capacity(batch.len());
    let mut labels_b = Vec::with_capacity(batch.len());
    let one_minus = S::one() - lambda;
    for (g, rows) in groups.iter().enumerate() {
        let partner = &groups[(g + 1) % groups.len()];
        for (&a, &b) in rows.iter().zip(partner) {
            let xa = &src[a * row_len..(a + 1) * row_len];
            let xb = &src[b * row_len..(b + 1) * row_len];
            images.extend(xa.iter().zip(xb).map(|(&u, &v)| lambda * u + one_minus * v));
            labels_a.push(batch.labels[a]);
            labels_b.push(batch.labels[b]);
        }
    }
    Ok(MixedBatch {
        images: Tensor::new(batch.images.shape().to_vec(), images)?,
        labels_a,
        labels_b,
        lambda,
    })
}

/// `lambda * CE(f(x_mix), y_a) + (1 - lambda) * CE(f(x_mix), y_b)`.
pub fn mixup_loss<S: Scalar>(
    tape: &mut Tape<S>,
    model: &GatedModel<S>,
    batch: &DomainBatch<S>,
    lambda: S,
) -> Result<(Var, ForwardPass)> {
    let mixed = mix_batch(batch, lambda)?;
    let x = tape.constant(mixed.images);
    let fwd = model.forward_on_tape(tape, x)?;
    let ce_a = tape.softmax_cross_entropy(fwd.logits, &mixed.labels_a)?;
    let ce_b = tape.softmax_cross_entropy(fwd.logits, &mixed.labels_b)?;
    let loss = tape.lin_comb(&[ce_a, ce_b], &[lambda, S::one() - lambda])?;
    Ok((loss, fwd))
}

/// Records the selected objective on `tape`, drawing Mixup weights from `rng`.
pub fn objective_loss<S: Scalar, R: Rng>(
    tape: &mut Tape<S>,
    model: &GatedModel<S>,
    batch: &DomainBatch<S>,
    loss: &PretrainLoss,
    rng: &mut R,
) -> Result<(Var, ForwardPass)> {
    match *loss {
        PretrainLoss::Erm {} => erm_loss(tape, model, batch),
        PretrainLoss::Coral { lambda } => coral_loss(tape, model, batch, lambda),
        PretrainLoss::Mixup { beta_param, fixed_lambda } => {
            let lambda = match fixed_lambda {
                Some(l) => l,
                None => Beta::new(beta_param, beta_param)
                    .map_err(|e| Error::Config(format!("Mixup beta parameter: {e}")))?
                    .sample(rng),
            };
            mixup_loss(tape, model, batch, S::of(lambda))
        }
    }
}
