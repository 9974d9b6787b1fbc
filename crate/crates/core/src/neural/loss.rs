//! Training objectives: class-weighted binary cross-entropy over point
//! labels and the scaled KL regularizer on the latent distribution.
//!
//! Two BCE variants exist. `Standard` weights the negative-class term as
//! lambda0 * (1 - c) * log(1 - c_hat); `AsPrinted` replaces log(1 - c_hat)
//! with (1 - log c_hat), reproducing a published form verbatim. The printed
//! term is unbounded below as c_hat -> 0, so the objective has no finite
//! minimum and its gradient on already-correct negatives never decays.
//! `Standard` is therefore the default everywhere; the variant is kept
//! selectable for comparison runs.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::layers::{sigmoid_f32, softplus_f32};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum BceForm {
    #[default]
    Standard,
    AsPrinted,
}

/// Alias kept for readability at call sites that select the negative-class
/// term shape explicitly.
pub type NegativeTerm = BceForm;

/// Mean weighted BCE over a batch of probabilities in (0, 1).
pub fn loss_bce(predictions: &Array1<f32>, labels: &[f32], lambda0: f32, lambda1: f32) -> f32 {
    assert_eq!(predictions.len(), labels.len());
    let n = labels.len().max(1) as f32;
    let mut acc = 0.0f64;
    for (&p, &c) in predictions.iter().zip(labels) {
        let p = p.clamp(1e-7, 1.0 - 1e-7);
        acc -= (lambda1 * c * p.ln() + lambda0 * (1.0 - c) * (1.0 - p).ln()) as f64;
    }
    acc as f32 / n
}

/// Mean weighted BCE with the negative-class term written as
/// lambda0 * (1 - c) * (1 - log c_hat). Can be negative.
pub fn loss_bce_alt(predictions: &Array1<f32>, labels: &[f32], lambda0: f32, lambda1: f32) -> f32 {
    assert_eq!(predictions.len(), labels.len());
    let n = labels.len().max(1) as f32;
    let mut acc = 0.0f64;
    for (&p, &c) in predictions.iter().zip(labels) {
        let p = p.clamp(1e-7, 1.0 - 1e-7);
        acc -= (lambda1 * c * p.ln() + lambda0 * (1.0 - c) * (1.0 - p.ln())) as f64;
    }
    acc as f32 / n
}

/// Numerically stable mean BCE straight from logits, with the per-logit
/// gradient of the mean. log c_hat = -softplus(-h), log(1 - c_hat) =
/// -softplus(h); both stay finite for any h.
pub fn bce_from_logits(
    logits: &Array1<f32>,
    labels: &[f32],
    lambda0: f32,
    lambda1: f32,
    form: BceForm,
) -> (f32, Array1<f32>) {
    assert_eq!(logits.len(), labels.len());
    let n = labels.len().max(1) as f32;
    let mut acc = 0.0f64;
    let mut grad = Array1::zeros(logits.len());
    for (i, (&h, &c)) in logits.iter().zip(labels).enumerate() {
        let log_p = -softplus_f32(-h);
        let p = sigmoid_f32(h);
        match form {
            BceForm::Standard => {
                let log_1mp = -softplus_f32(h);
                acc -= (lambda1 * c * log_p + lambda0 * (1.0 - c) * log_1mp) as f64;
                grad[i] = (lambda1 * c * (p - 1.0) + lambda0 * (1.0 - c) * p) / n;
            }
            BceForm::AsPrinted => {
                acc -= (lambda1 * c * log_p + lambda0 * (1.0 - c) * (1.0 - log_p)) as f64;
                grad[i] = (1.0 - p) * (lambda0 * (1.0 - c) - lambda1 * c) / n;
            }
        }
    }
    (acc as f32 / n, grad)
}

/// KL divergence of N(mu, diag(sigma^2)) from N(0, I) for one sample, summed
/// over latent dimensions and scaled by beta_norm:
///   -(beta_norm / 2) * sum_i (1 + log sigma_i^2 - mu_i^2 - sigma_i^2).
/// Batch totals are plain sums of per-sample values (no batch mean).
pub fn loss_kl(mu: &Array1<f32>, sigma: &Array1<f32>, beta_norm: f32) -> f32 {
    assert_eq!(mu.len(), sigma.len());
    let mut acc = 0.0f64;
    for (&m, &s) in mu.iter().zip(sigma) {
        acc += (1.0 + (s * s).ln() - m * m - s * s) as f64;
    }
    -(beta_norm as f64 / 2.0 * acc) as f32
}

/// Gradients of `loss_kl` with respect to mu and sigma:
///   d/dmu = beta_norm * mu,   d/dsigma = beta_norm * (sigma - 1/sigma).
pub fn loss_kl_grads(
    mu: &Array1<f32>,
    sigma: &Array1<f32>,
    beta_norm: f32,
) -> (Array1<f32>, Array1<f32>) {
    let dmu = mu.mapv(|m| beta_norm * m);
    let dsigma = sigma.mapv(|s| beta_norm * (s - 1.0 / s));
    (dmu, dsigma)
}
