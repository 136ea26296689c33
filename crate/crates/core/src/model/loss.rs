use super::config::LossReduction;
use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::tensor::{lit, Real};

/// Per-element weights of the pose loss over a `[B, S, 6]` prediction.
///
/// Translation slots get `1/n` and rotation slots `rot_weight * (1/n)`, where
/// `n` counts the `(batch, step, axis)` triples that contribute. Scaling the
/// translation weight keeps a unit rotation residual at exactly `rot_weight`
/// times a unit translation residual.
pub fn loss_weights(batch: usize, steps: usize, rot_weight: f64, reduction: LossReduction) -> Vec<f64> {
    let counted = match reduction {
        LossReduction::AllSteps => steps,
        LossReduction::LastStep => 1,
    };
    let n = (batch * counted * 3) as f64;
    let mut w = vec![0.0; batch * steps * 6];
    for b in 0..batch {
        for s in 0..steps {
            if reduction == LossReduction::LastStep && s + 1 != steps {
                continue;
            }
            let o = (b * steps + s) * 6;
            w[o..o + 3].fill(1.0 / n);
            w[o + 3..o + 6].fill(rot_weight * (1.0 / n));
        }
    }
    w
}

fn dims(shape: &[usize], target_len: usize) -> Result<(usize, usize)> {
    if shape.len() != 3 || shape[2] != 6 || shape.iter().product::<usize>() != target_len {
        return Err(Error::Shape(format!(
            "loss expects prediction [B, S, 6] matching {target_len} targets, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1]))
}

/// Mean squared translation residual plus `rot_weight` times the mean
/// squared rotation residual, as a differentiable scalar.
pub fn weighted_mse_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: &[f64],
    rot_weight: f64,
    reduction: LossReduction,
) -> Result<Var> {
    let (b, s) = dims(g.shape(pred), target.len())?;
    let weights = loss_weights(b, s, rot_weight, reduction);
    g.squared_error(
        pred,
        target.iter().map(|v| lit(*v)).collect(),
        weights.into_iter().map(lit).collect(),
    )
}

/// Loss value split into its parts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    /// Mean squared translation residual.
    pub translation: f64,
    /// Mean squared rotation residual, before weighting.
    pub rotation: f64,
}

pub fn loss_parts(
    pred: &[f64],
    shape: &[usize],
    target: &[f64],
    rot_weight: f64,
    reduction: LossReduction,
) -> Result<LossParts> {
    let (b, s) = dims(shape, target.len())?;
    if pred.len() != target.len() {
        return Err(Error::Shape("prediction and target lengths differ".into()));
    }
    let weights = loss_weights(b, s, 1.0, reduction);
    let mut parts = LossParts::default();
    for (i, ((p, t), w)) in pred.iter().zip(target).zip(&weights).enumerate() {
        let sq = w * (p - t) * (p - t);
        if i % 6 < 3 {
            parts.translation += sq;
        } else {
            parts.rotation += sq;
        }
    }
    parts.total = parts.translation + rot_weight * parts.rotation;
    Ok(parts)
}
