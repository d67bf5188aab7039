//! Patch-score regression from color histograms with an RBF kernel ridge
//! model; the non-detection baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{Patch, SlideSource};
use crate::model::AnnotationSet;
use crate::pipeline::{plan_tiles, TilePlan};
use crate::sampling::{sample_uniform, SamplerConfig};
use crate::scoring::{score_of, MAX_SCORE};

pub const DEFAULT_BINS: usize = 16;

/// Per-channel normalized histograms, R then G then B.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramFeature {
    pub bins: Vec<f64>,
}

pub fn histogram_features(patch: &Patch, bins: usize) -> Result<HistogramFeature> {
    if !(1..=256).contains(&bins) {
        return Err(Error::invalid(format!("bin count {bins} outside 1..=256")));
    }
    let n = patch.pixel_count();
    if n == 0 {
        return Err(Error::invalid("empty patch"));
    }
    let mut counts = vec![0u64; 3 * bins];
    for px in patch.pixels.chunks_exact(3) {
        for (ch, &v) in px.iter().enumerate() {
            counts[ch * bins + v as usize * bins / 256] += 1;
        }
    }
    Ok(HistogramFeature {
        bins: counts.into_iter().map(|c| c as f64 / n as f64).collect(),
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rbf(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    (-sq_dist(a, b) / (2.0 * sigma * sigma)).exp()
}

/// Solves `a x = b` for symmetric positive definite `a` (row-major n×n).
pub fn cholesky_solve(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    if a.len() != n * n {
        return Err(Error::invalid("matrix and right-hand side sizes differ"));
    }
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::invalid("matrix is not positive definite"));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelModel {
    pub support: Vec<Vec<f64>>,
    pub coefficients: Vec<f64>,
    pub sigma: f64,
    pub lambda: f64,
}

/// Kernel ridge fit: `(K + lambda I) coef = y`, `K_ij = exp(-|xi - xj|² / 2σ²)`.
pub fn fit(x: &[Vec<f64>], y: &[f64], sigma: f64, lambda: f64) -> Result<KernelModel> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::invalid(format!(
            "need matching non-empty inputs, got {} features and {} targets",
            x.len(),
            y.len()
        )));
    }
    if !(sigma > 0.0 && lambda > 0.0) {
        return Err(Error::invalid("sigma and lambda must be positive"));
    }
    let n = x.len();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = rbf(&x[i], &x[j], sigma);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
        k[i * n + i] += lambda;
    }
    let coefficients = cholesky_solve(&k, y)?;
    Ok(KernelModel {
        support: x.to_vec(),
        coefficients,
        sigma,
        lambda,
    })
}

impl KernelModel {
    pub fn predict_raw(&self, x: &[f64]) -> f64 {
        self.support
            .iter()
            .zip(&self.coefficients)
            .map(|(s, c)| c * rbf(s, x, self.sigma))
            .sum()
    }

    /// Prediction clamped to the score range [0, 400].
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.predict_raw(x).clamp(0.0, MAX_SCORE)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GridChoice {
    pub sigma: f64,
    pub lambda: f64,
    pub validation_mse: f64,
}

/// k-fold cross-validated grid search (sample `i` goes to fold `i % k`).
/// Ties prefer the smaller lambda, then the smaller sigma.
pub fn grid_search(
    x: &[Vec<f64>],
    y: &[f64],
    sigmas: &[f64],
    lambdas: &[f64],
    k: usize,
) -> Result<GridChoice> {
    if k < 2 || x.len() < k {
        return Err(Error::invalid(format!(
            "{k}-fold validation needs k >= 2 and at least k samples (have {})",
            x.len()
        )));
    }
    if x.len() != y.len() || sigmas.is_empty() || lambdas.is_empty() {
        return Err(Error::invalid("empty grid or mismatched inputs"));
    }
    let mut candidates: Vec<(f64, f64)> = Vec::new();
    for &l in lambdas {
        for &s in sigmas {
            candidates.push((l, s));
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let mut best: Option<GridChoice> = None;
    for (lambda, sigma) in candidates {
        let mut sq = 0.0;
        for fold in 0..k {
            let (mut tx, mut ty, mut vx, mut vy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for (i, (xi, yi)) in x.iter().zip(y).enumerate() {
                if i % k == fold {
                    vx.push(xi.clone());
                    vy.push(*yi);
                } else {
                    tx.push(xi.clone());
                    ty.push(*yi);
                }
            }
            let model = fit(&tx, &ty, sigma, lambda)?;
            sq += vx
                .iter()
                .zip(&vy)
                .map(|(xi, yi)| (model.predict(xi) - yi).powi(2))
                .sum::<f64>();
        }
        let mse = sq / x.len() as f64;
        if best.is_none_or(|b| mse < b.validation_mse) {
            best = Some(GridChoice {
                sigma,
                lambda,
                validation_mse: mse,
            });
        }
    }
    Ok(best.expect("non-empty grid"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub bins: usize,
    pub patches: usize,
    pub patch_size: u32,
    pub sigmas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub folds: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            bins: DEFAULT_BINS,
            patches: 100,
            patch_size: 1024,
            sigmas: vec![0.01, 0.02, 0.05, 0.1, 0.2, 0.5],
            lambdas: vec![0.001, 0.01, 0.1, 1.0],
            folds: 5,
        }
    }
}

/// Score of the cells whose center lies in `rect`.
fn region_score(set: &AnnotationSet, rect: &crate::model::BoundingBox) -> Option<f64> {
    let grades: Vec<_> = set
        .cells
        .iter()
        .filter(|c| {
            let (x, y) = c.bbox.center();
            rect.contains_point(x, y)
        })
        .map(|c| c.grade)
        .collect();
    score_of(&grades)
}

/// Histogram features and scores of uniformly sampled patches that hold at
/// least one cell. Gives up after `20 * n` draws.
pub fn training_samples<R: Rng + ?Sized>(
    slide: &SlideSource,
    set: &AnnotationSet,
    cfg: &BaselineConfig,
    rng: &mut R,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let sampler = SamplerConfig {
        patch_w: cfg.patch_size.min(slide.meta.width as u32),
        patch_h: cfg.patch_size.min(slide.meta.height as u32),
        ..Default::default()
    };
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let mut draws = 0;
    while xs.len() < cfg.patches && draws < 20 * cfg.patches {
        draws += 1;
        let rect = sampler.patch_at(sample_uniform(&slide.meta, &sampler, rng)?);
        let Some(score) = region_score(set, &rect) else {
            continue;
        };
        let patch = slide.read_region(&rect)?;
        xs.push(histogram_features(&patch, cfg.bins)?.bins);
        ys.push(score);
    }
    if xs.len() < cfg.folds.max(1) {
        return Err(Error::invalid(
            "too few annotated patches to train the baseline",
        ));
    }
    Ok((xs, ys))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BaselineReport {
    pub choice: GridChoice,
    pub training_patches: usize,
    /// Per tile of the plan, row-major.
    pub predictions: Vec<f64>,
    /// Mean absolute error over tiles holding ground-truth cells.
    pub patch_mae: f64,
    pub patch_sigma: f64,
    /// Mean of the tile predictions against the slide's THS.
    pub slide_error: f64,
}

/// Predicts a score for every tile of `plan` and compares with the ground
/// truth.
pub fn evaluate_on_plan(
    slide: &SlideSource,
    set: &AnnotationSet,
    plan: &TilePlan,
    model: &KernelModel,
    bins: usize,
) -> Result<(Vec<f64>, f64, f64, f64)> {
    let mut predictions = Vec::with_capacity(plan.len());
    let mut errors = Vec::new();
    for tile in &plan.tiles {
        let patch = slide.read_region(tile)?;
        let pred = model.predict(&histogram_features(&patch, bins)?.bins);
        drop(patch);
        if let Some(truth) = region_score(set, tile) {
            errors.push((pred - truth).abs());
        }
        predictions.push(pred);
    }
    if errors.is_empty() {
        return Err(Error::NoCells);
    }
    let n = errors.len() as f64;
    let mae = errors.iter().sum::<f64>() / n;
    let sigma = (errors.iter().map(|e| (e - mae).powi(2)).sum::<f64>() / n).sqrt();
    let slide_truth =
        score_of(&set.cells.iter().map(|c| c.grade).collect::<Vec<_>>()).ok_or(Error::NoCells)?;
    let slide_pred = predictions.iter().sum::<f64>() / predictions.len() as f64;
    Ok((predictions, mae, sigma, (slide_pred - slide_truth).abs()))
}

/// Samples training patches, grid-searches the kernel parameters, fits and
/// evaluates on the tiles of a default plan.
pub fn run_baseline<R: Rng + ?Sized>(
    slide: &SlideSource,
    set: &AnnotationSet,
    cfg: &BaselineConfig,
    rng: &mut R,
) -> Result<BaselineReport> {
    let (xs, ys) = training_samples(slide, set, cfg, rng)?;
    let choice = grid_search(&xs, &ys, &cfg.sigmas, &cfg.lambdas, cfg.folds)?;
    let model = fit(&xs, &ys, choice.sigma, choice.lambda)?;
    let plan = plan_tiles(&slide.meta, cfg.patch_size, cfg.patch_size, 0)?;
    let (predictions, patch_mae, patch_sigma, slide_error) =
        evaluate_on_plan(slide, set, &plan, &model, cfg.bins)?;
    Ok(BaselineReport {
        choice,
        training_patches: xs.len(),
        predictions,
        patch_mae,
        patch_sigma,
        slide_error,
    })
}
