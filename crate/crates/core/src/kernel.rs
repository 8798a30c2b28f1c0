//! Infinite-width view of the ReLU feature map.
//!
//! With `U` drawn i.i.d. Gaussian, `φ(x)ᵀφ(x')/m` converges to the arc-cosine
//! kernel as `m → ∞`. All theorem-level checks use the ratio
//! `k(x, x')/k(x, x)`, which is free of the kernel's scale constant.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::FEATURE_EPS;
use crate::model::{mix, relu_features, ModelParams, OutputVec};
use crate::world::{EntityId, FactEdit, Prompt, RelationId};

fn nonzero(x: &DVector<f64>, what: &str) -> Result<f64> {
    let n = x.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::DegenerateInput(format!("{what} has norm {n}")));
    }
    Ok(n)
}

/// Angle between `x` and `x'` in `[0, π]`.
pub fn angle(x: &DVector<f64>, xp: &DVector<f64>) -> Result<f64> {
    let (nx, nxp) = (nonzero(x, "x")?, nonzero(xp, "x'")?);
    Ok((x.dot(xp) / (nx * nxp)).clamp(-1.0, 1.0).acos())
}

/// `k(x, x') = ‖x‖‖x'‖ / (2(d+1)π) · ((π − η) cos η + sin η)`.
pub fn arccos_kernel(x: &DVector<f64>, xp: &DVector<f64>, d: usize) -> Result<f64> {
    if x.len() != xp.len() {
        return Err(Error::shape(format!("kernel inputs of length {} and {}", x.len(), xp.len())));
    }
    let eta = angle(x, xp)?;
    let j = (PI - eta) * eta.cos() + eta.sin();
    Ok(x.norm() * xp.norm() / (2.0 * (d as f64 + 1.0) * PI) * j)
}

/// `k(x, x')/k(x, x)`.
pub fn kernel_ratio(x: &DVector<f64>, xp: &DVector<f64>) -> Result<f64> {
    let d = x.len();
    Ok(arccos_kernel(x, xp, d)? / arccos_kernel(x, x, d)?)
}

/// `ReLU(Ux)ᵀReLU(Ux') / ‖ReLU(Ux)‖²` using the model's first layer.
pub fn mc_kernel_ratio(params: &ModelParams, x: &DVector<f64>, xp: &DVector<f64>) -> Result<f64> {
    mc_kernel_ratio_with(params.mlp_in(), x, xp)
}

/// As [`mc_kernel_ratio`] for an explicit first-layer matrix.
pub fn mc_kernel_ratio_with(u: &DMatrix<f64>, x: &DVector<f64>, xp: &DVector<f64>) -> Result<f64> {
    if x.len() != u.ncols() || xp.len() != u.ncols() {
        return Err(Error::shape(format!("inputs must have length {}", u.ncols())));
    }
    let (a, b) = (relu_features(u, x), relu_features(u, xp));
    let sq = a.dot(&a);
    if sq.sqrt() <= FEATURE_EPS {
        return Err(Error::DegenerateFeatures { prompt: "kernel query".into(), norm: sq.sqrt(), eps: FEATURE_EPS });
    }
    Ok(a.dot(&b) / sq)
}

/// Unnormalized Monte-Carlo kernel `φ(x)ᵀφ(x')/m`. Diagnostic only: the
/// bias-free feature map converges to `‖x‖‖x'‖ J(η) / (2πd)`, not to the
/// `2(d+1)π` normalization of [`arccos_kernel`].
pub fn mc_kernel(params: &ModelParams, x: &DVector<f64>, xp: &DVector<f64>) -> Result<f64> {
    let u = params.mlp_in();
    if x.len() != u.ncols() || xp.len() != u.ncols() {
        return Err(Error::shape(format!("inputs must have length {}", u.ncols())));
    }
    Ok(relu_features(u, x).dot(&relu_features(u, xp)) / u.nrows() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelPrediction {
    /// Coefficient on `i_y − i_{r1(x)}`.
    pub c1: f64,
    /// Coefficient on `i_z − i_{r2(y)}`.
    pub c2: f64,
    pub eta1: DVector<f64>,
    pub eta2: DVector<f64>,
    pub xi: DVector<f64>,
}

/// Infinite-width coefficients of the summed one-hop adapters on `x r1 r2`.
///
/// `η₁ = V e_x + e_r1`, `η₂ = V e_y + e_r2` with `y = edit1.new_target`,
/// `ξ = (V/2) e_x + (V/2) e_r1 + e_r2`.
pub fn predict_two_hop(
    params: &ModelParams,
    subject: EntityId,
    r1: RelationId,
    r2: RelationId,
    edit1: &FactEdit,
    edit2: &FactEdit,
) -> Result<KernelPrediction> {
    if edit1.rel != r1 || edit1.subject != subject {
        return Err(Error::param(format!(
            "first edit is on {} {}, expected {subject} {r1}",
            edit1.subject, edit1.rel
        )));
    }
    if edit2.rel != r2 || edit2.subject != edit1.new_target {
        return Err(Error::param(format!(
            "second edit is on {} {}, expected {} {r2}",
            edit2.subject, edit2.rel, edit1.new_target
        )));
    }
    let eta1 = mix(params, &Prompt::one_hop(subject, r1))?;
    let eta2 = mix(params, &Prompt::one_hop(edit1.new_target, r2))?;
    let xi = mix(params, &Prompt::two_hop(subject, r1, r2))?;
    let c1 = kernel_ratio(&eta1, &xi)?;
    let c2 = kernel_ratio(&eta2, &xi)?;
    Ok(KernelPrediction { c1, c2, eta1, eta2, xi })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub c1: f64,
    pub c2: f64,
    pub residual_rel: f64,
}

/// Least-squares coordinates of `output` in `span{w1, w2}`.
pub fn mixture_decompose(output: &OutputVec, w1: &OutputVec, w2: &OutputVec) -> Result<Mixture> {
    let (o, a, b) = (&output.0, &w1.0, &w2.0);
    if o.len() != a.len() || o.len() != b.len() {
        return Err(Error::shape("mixture vectors differ in length"));
    }
    let (g11, g12, g22) = (a.dot(a), a.dot(b), b.dot(b));
    let det = g11 * g22 - g12 * g12;
    if !(det > 1e-12 * g11 * g22) {
        return Err(Error::DegenerateBasis);
    }
    let (h1, h2) = (a.dot(o), b.dot(o));
    let c1 = (g22 * h1 - g12 * h2) / det;
    let c2 = (g11 * h2 - g12 * h1) / det;
    let norm = o.norm();
    let residual_rel = if norm == 0.0 { 0.0 } else { (o - a * c1 - b * c2).norm() / norm };
    Ok(Mixture { c1, c2, residual_rel })
}

/// Fits `y = a·x^p` by least squares in log-log space; returns `(a, p)`.
pub fn fit_power_law(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::param("power-law fit needs at least two paired points"));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::param("power-law fit needs positive finite values"));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxx: f64 = lx.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::param("power-law fit needs distinct x values"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let p = sxy / sxx;
    Ok(((my - p * mx).exp(), p))
}
