//! Training loss of the detector with cell- and patch-score heads:
//! focal classification loss + smooth-L1 box regression + MSE on the per-cell
//! score + MSE on the per-patch score, each with an analytic gradient.

use serde::{Deserialize, Serialize};

use super::pairwise_sum;
use crate::error::{Error, Result};
use crate::model::{ContinuousGrade, Grade, NUM_GRADES};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid(format!(
                "focal alpha {} outside (0, 1]",
                self.alpha
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!(
                "focal gamma {} must be >= 0",
                self.gamma
            )));
        }
        Ok(())
    }
}

fn check_prob(p_t: f64) -> Result<()> {
    if p_t > 0.0 && p_t <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("p_t = {p_t} outside (0, 1]")))
    }
}

/// `-alpha * (1 - p_t)^gamma * ln(p_t)`.
pub fn focal_loss(p_t: f64, params: &FocalParams) -> Result<f64> {
    params.validate()?;
    check_prob(p_t)?;
    Ok(focal_unchecked(p_t, params.alpha, params.gamma))
}

fn focal_unchecked(p: f64, alpha: f64, gamma: f64) -> f64 {
    -alpha * (1.0 - p).powf(gamma) * p.ln()
}

/// d/dp of [`focal_loss`].
pub fn focal_loss_grad(p_t: f64, params: &FocalParams) -> Result<f64> {
    params.validate()?;
    check_prob(p_t)?;
    Ok(focal_grad_unchecked(p_t, params.alpha, params.gamma))
}

fn focal_grad_unchecked(p: f64, alpha: f64, gamma: f64) -> f64 {
    let q = 1.0 - p;
    // gamma * q^(gamma-1) * ln p vanishes at gamma = 0 and at p = 1
    let focus = if gamma == 0.0 || q == 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0) * p.ln()
    };
    alpha * (focus - q.powf(gamma) / p)
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::invalid("empty input"));
    }
    Ok(())
}

fn smooth_l1_term(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

/// Mean smooth-L1 (Huber, delta 1) distance between `x` and `y`.
pub fn smooth_l1(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let terms: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| smooth_l1_term(a - b))
        .collect();
    Ok(pairwise_sum(&terms) / x.len() as f64)
}

/// Gradient of [`smooth_l1`] with respect to `x`.
pub fn smooth_l1_grad(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    Ok(x.iter()
        .zip(y)
        .map(|(a, b)| {
            let d = a - b;
            if d.abs() < 1.0 {
                d / n
            } else {
                d.signum() / n
            }
        })
        .collect())
}

/// Mean squared error between predictions and targets.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    let terms: Vec<f64> = pred
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .collect();
    Ok(pairwise_sum(&terms) / pred.len() as f64)
}

/// Gradient of [`mse`] with respect to `pred`.
pub fn mse_grad(pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    check_pair(pred, target)?;
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(a, b)| 2.0 * (a - b) / n)
        .collect())
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid stretched onto (-0.5, 4.5) so that grades 0 and 4 sit away from
/// the saturated ends.
pub fn scaled_sigmoid(z: f64) -> ContinuousGrade {
    ContinuousGrade::new(ContinuousGrade::MIN + 5.0 * sigmoid(z))
        .expect("sigmoid output is within [-0.5, 4.5]")
}

pub fn scaled_sigmoid_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    5.0 * s * (1.0 - s)
}

/// Logit that [`scaled_sigmoid`] maps to `value`. Needs -0.5 < value < 4.5.
pub fn inverse_scaled_sigmoid(value: f64) -> Result<f64> {
    if !(value > ContinuousGrade::MIN && value < ContinuousGrade::MAX) {
        return Err(Error::invalid(format!(
            "{value} is not strictly inside (-0.5, 4.5)"
        )));
    }
    let s = (value - ContinuousGrade::MIN) / 5.0;
    Ok((s / (1.0 - s)).ln())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorLabel {
    Background,
    Ignore,
    Cell(Grade),
}

/// One training batch. Box and cell-score vectors hold one entry per positive
/// anchor, in anchor order; patch scores hold one entry per patch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBatch {
    pub class_probs: Vec<[f64; NUM_GRADES]>,
    pub class_targets: Vec<AnchorLabel>,
    pub box_pred: Vec<[f64; 4]>,
    pub box_target: Vec<[f64; 4]>,
    pub cell_score_pred: Vec<f64>,
    pub cell_score_target: Vec<f64>,
    pub patch_score_pred: Vec<f64>,
    pub patch_score_target: Vec<f64>,
}

impl LossBatch {
    pub fn positives(&self) -> usize {
        self.class_targets
            .iter()
            .filter(|t| matches!(t, AnchorLabel::Cell(_)))
            .count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_probs.len() != self.class_targets.len() {
            return Err(Error::invalid(
                "class_probs and class_targets differ in length",
            ));
        }
        let pos = self.positives();
        if self.box_pred.len() != pos || self.box_target.len() != pos {
            return Err(Error::invalid(format!(
                "box vectors need one entry per positive anchor ({pos})"
            )));
        }
        if self.cell_score_pred.len() != pos || self.cell_score_target.len() != pos {
            return Err(Error::invalid(format!(
                "cell scores need one entry per positive anchor ({pos})"
            )));
        }
        if self.patch_score_pred.len() != self.patch_score_target.len() {
            return Err(Error::invalid("patch score vectors differ in length"));
        }
        for p in &self.class_probs {
            if p.iter().any(|v| !(*v >= 0.0)) || p.iter().sum::<f64>() > 1.0 + 1e-12 {
                return Err(Error::invalid(
                    "class probabilities must be >= 0 and sum to <= 1",
                ));
            }
        }
        Ok(())
    }

    fn flat_boxes(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.box_pred.iter().flatten().copied().collect(),
            self.box_target.iter().flatten().copied().collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub focal: f64,
    pub box_regression: f64,
    pub cell_score: f64,
    pub patch_score: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossGradient {
    pub class_probs: Vec<[f64; NUM_GRADES]>,
    pub box_pred: Vec<[f64; 4]>,
    pub cell_score_pred: Vec<f64>,
    pub patch_score_pred: Vec<f64>,
}

/// Probability of the target class and its weight. Positive anchors use
/// `alpha`, background anchors `1 - alpha` on the leftover mass `1 - sum(p)`.
fn target_prob(
    probs: &[f64; NUM_GRADES],
    label: AnchorLabel,
    params: &FocalParams,
) -> Option<(f64, f64)> {
    match label {
        AnchorLabel::Ignore => None,
        AnchorLabel::Cell(g) => Some((probs[g.index()], params.alpha)),
        AnchorLabel::Background => Some((1.0 - probs.iter().sum::<f64>(), 1.0 - params.alpha)),
    }
}

fn mean_or_zero<F>(x: &[f64], y: &[f64], f: F) -> Result<f64>
where
    F: Fn(&[f64], &[f64]) -> Result<f64>,
{
    if x.is_empty() && y.is_empty() {
        Ok(0.0)
    } else {
        f(x, y)
    }
}

/// Sum of the four loss terms. The focal term is averaged over non-ignored
/// anchors; a term with no contributing entries is zero.
pub fn total_loss(batch: &LossBatch, params: &FocalParams) -> Result<LossBreakdown> {
    params.validate()?;
    batch.validate()?;

    let mut focal_terms = Vec::with_capacity(batch.class_probs.len());
    for (probs, &label) in batch.class_probs.iter().zip(&batch.class_targets) {
        if let Some((p_t, alpha_t)) = target_prob(probs, label, params) {
            check_prob(p_t)?;
            focal_terms.push(focal_unchecked(p_t, alpha_t, params.gamma));
        }
    }
    let focal = if focal_terms.is_empty() {
        0.0
    } else {
        pairwise_sum(&focal_terms) / focal_terms.len() as f64
    };

    let (bp, bt) = batch.flat_boxes();
    let box_regression = mean_or_zero(&bp, &bt, smooth_l1)?;
    let cell_score = mean_or_zero(&batch.cell_score_pred, &batch.cell_score_target, mse)?;
    let patch_score = mean_or_zero(&batch.patch_score_pred, &batch.patch_score_target, mse)?;
    Ok(LossBreakdown {
        focal,
        box_regression,
        cell_score,
        patch_score,
        total: focal + box_regression + cell_score + patch_score,
    })
}

/// Gradient of [`total_loss`] with respect to every prediction in the batch.
pub fn total_loss_grad(batch: &LossBatch, params: &FocalParams) -> Result<LossGradient> {
    params.validate()?;
    batch.validate()?;

    let counted = batch
        .class_targets
        .iter()
        .filter(|l| !matches!(l, AnchorLabel::Ignore))
        .count()
        .max(1) as f64;
    let mut class_probs = vec![[0.0; NUM_GRADES]; batch.class_probs.len()];
    for (i, (probs, &label)) in batch
        .class_probs
        .iter()
        .zip(&batch.class_targets)
        .enumerate()
    {
        let Some((p_t, alpha_t)) = target_prob(probs, label, params) else {
            continue;
        };
        check_prob(p_t)?;
        let d = focal_grad_unchecked(p_t, alpha_t, params.gamma) / counted;
        match label {
            AnchorLabel::Cell(g) => class_probs[i][g.index()] = d,
            // p_t = 1 - sum(p), so every component moves p_t by -1
            AnchorLabel::Background => class_probs[i] = [-d; NUM_GRADES],
            AnchorLabel::Ignore => unreachable!(),
        }
    }

    let (bp, bt) = batch.flat_boxes();
    let box_flat = if bp.is_empty() {
        Vec::new()
    } else {
        smooth_l1_grad(&bp, &bt)?
    };
    let box_pred = box_flat
        .chunks_exact(4)
        .map(|c| [c[0], c[1], c[2], c[3]])
        .collect();
    let grad_or_empty = |x: &[f64], y: &[f64]| -> Result<Vec<f64>> {
        if x.is_empty() {
            Ok(Vec::new())
        } else {
            mse_grad(x, y)
        }
    };
    Ok(LossGradient {
        class_probs,
        box_pred,
        cell_score_pred: grad_or_empty(&batch.cell_score_pred, &batch.cell_score_target)?,
        patch_score_pred: grad_or_empty(&batch.patch_score_pred, &batch.patch_score_target)?,
    })
}
