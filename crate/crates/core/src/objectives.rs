//! Clamped cosine similarity and the matching, prompt and refinement losses.
//!
//! Every score is clamped from below at `eps`. Terms of the form
//! `-log(1 - sim)` additionally clamp the complement `1 - sim` at `eps`, so
//! the loss stays finite when `sim -> 1`. Inside a clamped region the
//! gradient is zero. Exactly at a boundary the pass-through branch is used.
//!
//! All functions take raw vectors and compute the true cosine, so gradients
//! are exact for any non-zero input, normalized or not.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Scalar value of `max(cos(a, b), eps)`.
pub fn clamped_cos(a: ArrayView1<f64>, b: ArrayView1<f64>, eps: f64) -> Result<f64> {
    Ok(cosine(a, b)?.clamped(eps))
}

struct Cosine {
    value: f64,
    grad_a: Array1<f64>,
    grad_b: Array1<f64>,
}

impl Cosine {
    fn clamped(&self, eps: f64) -> f64 {
        if self.value >= eps {
            self.value
        } else {
            eps
        }
    }
}

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<Cosine> {
    if a.len() != b.len() {
        bail!(Invalid, "cosine of vectors with lengths {} and {}", a.len(), b.len());
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        bail!(Invalid, "non-finite input to cosine similarity");
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        bail!(Invalid, "cosine similarity of a zero vector");
    }
    let value = a.dot(&b) / (na * nb);
    let grad_a = &b / (na * nb) - &a * (value / (na * na));
    let grad_b = &a / (na * nb) - &b * (value / (nb * nb));
    Ok(Cosine {
        value,
        grad_a,
        grad_b,
    })
}

/// `-log(max(cos(a,b), eps))` with its gradients.
fn neg_log_sim(a: ArrayView1<f64>, b: ArrayView1<f64>, eps: f64) -> Result<(f64, Array1<f64>, Array1<f64>)> {
    let c = cosine(a, b)?;
    if c.value >= eps {
        let scale = -1.0 / c.value;
        Ok((-c.value.ln(), c.grad_a * scale, c.grad_b * scale))
    } else {
        Ok((-eps.ln(), Array1::zeros(a.len()), Array1::zeros(b.len())))
    }
}

/// `-log(max(1 - max(cos(a,b), eps), eps))` with its gradients.
fn neg_log_dissim(a: ArrayView1<f64>, b: ArrayView1<f64>, eps: f64) -> Result<(f64, Array1<f64>, Array1<f64>)> {
    let c = cosine(a, b)?;
    let sim = c.clamped(eps);
    let complement = 1.0 - sim;
    if c.value >= eps && complement >= eps {
        let scale = 1.0 / complement;
        Ok((-complement.ln(), c.grad_a * scale, c.grad_b * scale))
    } else {
        let q = complement.max(eps);
        Ok((-q.ln(), Array1::zeros(a.len()), Array1::zeros(b.len())))
    }
}

#[derive(Debug, Clone)]
pub struct MatchLoss {
    pub value: f64,
    pub grad_vf: Array1<f64>,
    pub grad_vb: Array1<f64>,
    pub grad_uf: Array1<f64>,
}

/// Matching loss for one (foreground, background, class text) triplet:
/// `-log sim(v_f, u_f) - lambda_b * log(1 - sim(v_b, u_f))`.
pub fn loss_match(
    v_f: ArrayView1<f64>,
    v_b: ArrayView1<f64>,
    u_f: ArrayView1<f64>,
    lambda_b: f64,
    eps: f64,
) -> Result<MatchLoss> {
    let (fg, g_vf, g_uf1) = neg_log_sim(v_f, u_f, eps)?;
    let (bg, g_vb, g_uf2) = neg_log_dissim(v_b, u_f, eps)?;
    Ok(MatchLoss {
        value: fg + lambda_b * bg,
        grad_vf: g_vf,
        grad_vb: g_vb * lambda_b,
        grad_uf: g_uf1 + g_uf2 * lambda_b,
    })
}

#[derive(Debug, Clone)]
pub struct PromptLoss {
    /// `-log sim(u_b, v_b)`
    pub image_term: f64,
    /// `-log(1 - sim(u_b, u_f))`
    pub text_term: f64,
    /// `image_term + lambda_t * text_term`
    pub total: f64,
    pub grad_ub: Array1<f64>,
    pub grad_vb: Array1<f64>,
    pub grad_uf: Array1<f64>,
    /// Unweighted gradient of `image_term` with respect to `u_b`.
    pub grad_ub_image: Array1<f64>,
    /// Unweighted gradient of `text_term` with respect to `u_b`.
    pub grad_ub_text: Array1<f64>,
}

/// Prompt loss pulling the background prompt embedding `u_b` towards the
/// background image `v_b` and away from the class text `u_f`.
pub fn loss_prompt(
    u_b: ArrayView1<f64>,
    v_b: ArrayView1<f64>,
    u_f: ArrayView1<f64>,
    lambda_t: f64,
    eps: f64,
) -> Result<PromptLoss> {
    let (image_term, g_ub1, grad_vb) = neg_log_sim(u_b, v_b, eps)?;
    let (text_term, g_ub2, g_uf) = neg_log_dissim(u_b, u_f, eps)?;
    Ok(PromptLoss {
        image_term,
        text_term,
        total: image_term + lambda_t * text_term,
        grad_ub: &g_ub1 + &(&g_ub2 * lambda_t),
        grad_vb,
        grad_uf: g_uf * lambda_t,
        grad_ub_image: g_ub1,
        grad_ub_text: g_ub2,
    })
}

#[derive(Debug, Clone)]
pub struct RefineLoss {
    pub value: f64,
    pub grad_vf: Array1<f64>,
    pub grad_ub: Array1<f64>,
}

/// Refinement loss `-log(1 - sim(v_f, u_b))`: keeps the foreground away from
/// the learned background prompt.
pub fn loss_refine(v_f: ArrayView1<f64>, u_b: ArrayView1<f64>, eps: f64) -> Result<RefineLoss> {
    let (value, grad_vf, grad_ub) = neg_log_dissim(v_f, u_b, eps)?;
    Ok(RefineLoss {
        value,
        grad_vf,
        grad_ub,
    })
}

pub fn loss_total(matching: f64, refine: f64, lambda: f64) -> f64 {
    matching + lambda * refine
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_b: f64,
    #[serde(rename = "lambda_T")]
    pub lambda_t: f64,
    pub lambda: f64,
}

/// Batch-level loss values, as written to the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(rename = "match")]
    pub matching: f64,
    #[serde(rename = "prompt_I")]
    pub prompt_image: f64,
    #[serde(rename = "prompt_T")]
    pub prompt_text: f64,
    pub prompt_total: f64,
    pub refine: f64,
    /// The objective optimized in the phase that produced this report.
    pub total: f64,
    pub weights: LossWeights,
}

impl LossReport {
    pub fn zero(weights: LossWeights) -> Self {
        LossReport {
            matching: 0.0,
            prompt_image: 0.0,
            prompt_text: 0.0,
            prompt_total: 0.0,
            refine: 0.0,
            total: 0.0,
            weights,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.matching,
            self.prompt_image,
            self.prompt_text,
            self.prompt_total,
            self.refine,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}
