//! Self-check of the loss: analytic gradients of every term against finite
//! differences on a random batch, the focal/cross-entropy identity, and the
//! zero loss of a perfect batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::gradcheck::{grad_check, grad_check_with, DiffScheme};
use super::loss::{
    focal_loss, mse, mse_grad, scaled_sigmoid, scaled_sigmoid_grad, smooth_l1, smooth_l1_grad,
    total_loss, total_loss_grad, AnchorLabel, FocalParams, LossBatch,
};
use crate::error::Result;
use crate::model::{Grade, NUM_GRADES};

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
/// Looser bound where smooth L1 switches from quadratic to linear.
pub const KINK_TOLERANCE: f64 = 1e-2;
pub const CE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TermCheck {
    pub term: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossCheckReport {
    pub gradients: Vec<TermCheck>,
    /// Largest `|focal(p; alpha 1, gamma 0) + ln p|` over a grid of p.
    pub cross_entropy_max_abs: f64,
    pub perfect_batch_loss: f64,
    pub passed: bool,
}

fn term(name: &str, err: f64, tol: f64) -> TermCheck {
    TermCheck {
        term: name.to_string(),
        max_rel_error: err,
        tolerance: tol,
        passed: err < tol,
    }
}

/// Random batch with `n` anchors; probabilities are kept away from 0 and from
/// summing to 1 so every `p_t` stays inside (0, 1) under perturbation.
pub fn random_batch<R: Rng + ?Sized>(n: usize, patches: usize, rng: &mut R) -> LossBatch {
    let mut b = LossBatch::default();
    for _ in 0..n {
        b.class_probs
            .push(std::array::from_fn(|_| rng.random_range(0.02..0.18)));
        let label = match rng.random_range(0..10) {
            0 => AnchorLabel::Ignore,
            1..=4 => AnchorLabel::Background,
            _ => AnchorLabel::Cell(Grade::from_index(rng.random_range(0..NUM_GRADES))),
        };
        b.class_targets.push(label);
        if let AnchorLabel::Cell(_) = label {
            // keep every coordinate at least 0.1 away from the |d| = 1 switch
            let d: [f64; 4] = std::array::from_fn(|_| {
                let m = if rng.random() {
                    rng.random_range(0.05..0.9)
                } else {
                    rng.random_range(1.1..3.0)
                };
                if rng.random() {
                    m
                } else {
                    -m
                }
            });
            let t: [f64; 4] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
            b.box_target.push(t);
            b.box_pred.push(std::array::from_fn(|k| t[k] + d[k]));
            b.cell_score_pred.push(rng.random_range(-0.5..4.5));
            b.cell_score_target.push(rng.random_range(0.0..4.0));
        }
    }
    for _ in 0..patches {
        b.patch_score_pred.push(rng.random_range(-0.5..4.5));
        b.patch_score_target.push(rng.random_range(0.0..4.0));
    }
    b
}

pub fn loss_check_suite(seed: u64) -> Result<LossCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = FocalParams::default();
    let batch = random_batch(40, 6, &mut rng);
    let grad = total_loss_grad(&batch, &params)?;
    let mut gradients = Vec::new();

    // focal term, as a function of all class probabilities
    let flat: Vec<f64> = batch.class_probs.iter().flatten().copied().collect();
    let analytic: Vec<f64> = grad.class_probs.iter().flatten().copied().collect();
    let focal_at = |x: &[f64]| {
        let mut b = batch.clone();
        for (i, p) in b.class_probs.iter_mut().enumerate() {
            p.copy_from_slice(&x[i * NUM_GRADES..(i + 1) * NUM_GRADES]);
        }
        total_loss(&b, &params).map(|l| l.focal).unwrap_or(f64::NAN)
    };
    gradients.push(term(
        "focal",
        grad_check(focal_at, &flat, &analytic)?,
        GRADIENT_TOLERANCE,
    ));

    // box regression away from and at the switch
    let bp: Vec<f64> = batch.box_pred.iter().flatten().copied().collect();
    let bt: Vec<f64> = batch.box_target.iter().flatten().copied().collect();
    let ana: Vec<f64> = grad.box_pred.iter().flatten().copied().collect();
    let e = grad_check(|x| smooth_l1(x, &bt).unwrap_or(f64::NAN), &bp, &ana)?;
    gradients.push(term("box_regression", e, GRADIENT_TOLERANCE));
    let at_kink = [1.0, -1.0, 1.0 + 1e-9, -1.0 + 1e-9];
    let zeros = [0.0; 4];
    let ana = smooth_l1_grad(&at_kink, &zeros)?;
    let mut e = 0.0f64;
    for scheme in [
        DiffScheme::Central,
        DiffScheme::Forward,
        DiffScheme::Backward,
    ] {
        e = e.max(grad_check_with(
            |x| smooth_l1(x, &zeros).unwrap_or(f64::NAN),
            &at_kink,
            &ana,
            scheme,
            1e-5,
        )?);
    }
    gradients.push(term("box_regression_kink", e, KINK_TOLERANCE));

    // cell score through the scaled sigmoid, as a function of the logits
    let targets = batch.cell_score_target.clone();
    let logits: Vec<f64> = (0..targets.len())
        .map(|_| rng.random_range(-4.0..4.0))
        .collect();
    let cell_at = |z: &[f64]| {
        let s: Vec<f64> = z.iter().map(|&v| scaled_sigmoid(v).value()).collect();
        mse(&s, &targets).unwrap_or(f64::NAN)
    };
    let s: Vec<f64> = logits.iter().map(|&v| scaled_sigmoid(v).value()).collect();
    let ana: Vec<f64> = mse_grad(&s, &targets)?
        .iter()
        .zip(&logits)
        .map(|(g, &z)| g * scaled_sigmoid_grad(z))
        .collect();
    gradients.push(term(
        "cell_score",
        grad_check(cell_at, &logits, &ana)?,
        GRADIENT_TOLERANCE,
    ));

    // cell score directly, as it enters the total
    let e = grad_check(
        |x| mse(x, &batch.cell_score_target).unwrap_or(f64::NAN),
        &batch.cell_score_pred,
        &grad.cell_score_pred,
    )?;
    gradients.push(term("cell_score_direct", e, GRADIENT_TOLERANCE));

    let e = grad_check(
        |x| mse(x, &batch.patch_score_target).unwrap_or(f64::NAN),
        &batch.patch_score_pred,
        &grad.patch_score_pred,
    )?;
    gradients.push(term("patch_score", e, GRADIENT_TOLERANCE));

    let ce_params = FocalParams {
        alpha: 1.0,
        gamma: 0.0,
    };
    let mut cross_entropy_max_abs = 0.0f64;
    for k in 1..=1000 {
        let p = k as f64 / 1000.0;
        cross_entropy_max_abs =
            cross_entropy_max_abs.max((focal_loss(p, &ce_params)? + p.ln()).abs());
    }

    let perfect_batch_loss = total_loss(&perfect_batch(&batch), &params)?.total;
    let passed = gradients.iter().all(|t| t.passed)
        && cross_entropy_max_abs <= CE_TOLERANCE
        && perfect_batch_loss == 0.0;
    Ok(LossCheckReport {
        gradients,
        cross_entropy_max_abs,
        perfect_batch_loss,
        passed,
    })
}

/// Same layout as `batch` with every prediction equal to its target.
pub fn perfect_batch(batch: &LossBatch) -> LossBatch {
    let mut b = batch.clone();
    for (p, label) in b.class_probs.iter_mut().zip(&b.class_targets) {
        *p = [0.0; NUM_GRADES];
        if let AnchorLabel::Cell(g) = label {
            p[g.index()] = 1.0;
        }
    }
    b.box_pred = b.box_target.clone();
    b.cell_score_pred = b.cell_score_target.clone();
    b.patch_score_pred = b.patch_score_target.clone();
    b
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for seed in 0..5 {
            let r = loss_check_suite(seed).unwrap();
            assert!(r.passed, "{r:#?}");
        }
    }

    #[test]
    fn random_batch_is_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        random_batch(100, 3, &mut rng).validate().unwrap();
    }
}
