//! One-layer transformer with exactly uniform single-head attention, a frozen
//! ReLU random-features MLP, and a trainable linear readout.
//!
//! For a prompt whose last token embedding is `e_last` and whose preceding
//! token embeddings are `e_1 … e_k`, the attention output at the last position
//! is `e_last + V · mean(e_1 … e_k)`. The MLP features are
//! `φ = ReLU(U · mix)` and the scores are `W · φ` (no softmax). The key and
//! query maps are not stored: with uniform attention they have no effect.

use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{self, argmax};
use crate::rng;
use crate::world::{EntityId, Prompt, RelationId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelDims {
    /// Embedding width.
    pub d: usize,
    /// MLP hidden width.
    pub m: usize,
    pub num_entities: usize,
    pub num_relations: usize,
}

impl ModelDims {
    pub fn new(d: usize, m: usize, num_entities: usize, num_relations: usize) -> Result<Self> {
        let dims = ModelDims { d, m, num_entities, num_relations };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::param(format!("d must be >= 2, got {}", self.d)));
        }
        if self.m < 1 {
            return Err(Error::param("m must be >= 1"));
        }
        if self.num_entities < 1 {
            return Err(Error::param("model needs at least one entity"));
        }
        Ok(())
    }

    pub fn vocab(&self) -> usize {
        self.num_entities + self.num_relations
    }
}

#[derive(Debug)]
struct Frozen {
    /// vocab × d; entity tokens first, then relation tokens.
    embeddings: DMatrix<f64>,
    /// m × d
    mlp_in: DMatrix<f64>,
    /// d × d
    value: DMatrix<f64>,
}

/// Model parameters. `E`, `U`, `V` are shared and never mutated; fitting and
/// editing only ever produce new readouts `W`.
#[derive(Clone, Debug)]
pub struct ModelParams {
    frozen: Arc<Frozen>,
    output: DMatrix<f64>,
    dims: ModelDims,
    seed: u64,
}

impl ModelParams {
    /// Assembles parameters from explicit matrices (fixtures, tests, file loads).
    pub fn from_parts(
        dims: ModelDims,
        embeddings: DMatrix<f64>,
        mlp_in: DMatrix<f64>,
        value: DMatrix<f64>,
        output: DMatrix<f64>,
        seed: u64,
    ) -> Result<Self> {
        dims.validate()?;
        let expect = |name: &str, m: &DMatrix<f64>, r: usize, c: usize| {
            if m.shape() == (r, c) {
                Ok(())
            } else {
                Err(Error::shape(format!("{name} is {:?}, expected ({r}, {c})", m.shape())))
            }
        };
        expect("E", &embeddings, dims.vocab(), dims.d)?;
        expect("U", &mlp_in, dims.m, dims.d)?;
        expect("V", &value, dims.d, dims.d)?;
        expect("W", &output, dims.num_entities, dims.m)?;
        Ok(ModelParams { frozen: Arc::new(Frozen { embeddings, mlp_in, value }), output, dims, seed })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn embeddings(&self) -> &DMatrix<f64> {
        &self.frozen.embeddings
    }

    pub fn mlp_in(&self) -> &DMatrix<f64> {
        &self.frozen.mlp_in
    }

    pub fn value(&self) -> &DMatrix<f64> {
        &self.frozen.value
    }

    /// The trainable readout `W`.
    pub fn output(&self) -> &DMatrix<f64> {
        &self.output
    }

    /// Same frozen matrices, new readout.
    pub fn with_output(&self, output: DMatrix<f64>) -> Result<Self> {
        if output.shape() != (self.dims.num_entities, self.dims.m) {
            return Err(Error::shape(format!(
                "W is {:?}, expected ({}, {})",
                output.shape(),
                self.dims.num_entities,
                self.dims.m
            )));
        }
        Ok(ModelParams { frozen: Arc::clone(&self.frozen), output, dims: self.dims, seed: self.seed })
    }

    /// Keeps the first `m` rows of `U` and resets `W` to zero. With
    /// [`init_params`] this equals a fresh model of width `m` and the same seed.
    pub fn with_width(&self, m: usize) -> Result<Self> {
        if m == 0 || m > self.dims.m {
            return Err(Error::param(format!("width {m} must be in 1..={}", self.dims.m)));
        }
        let dims = ModelDims { m, ..self.dims };
        ModelParams::from_parts(
            dims,
            self.frozen.embeddings.clone(),
            self.frozen.mlp_in.rows(0, m).into_owned(),
            self.frozen.value.clone(),
            DMatrix::zeros(dims.num_entities, m),
            self.seed,
        )
    }

    /// Fits `W` on `facts` and returns the refitted parameters.
    pub fn fitted(&self, facts: &[(Prompt, EntityId)], ridge: f64) -> Result<Self> {
        self.with_output(fit_w(self, facts, ridge)?.weights)
    }

    pub fn entity_embedding(&self, x: EntityId) -> DVector<f64> {
        self.frozen.embeddings.row(x.0).transpose()
    }

    pub fn relation_embedding(&self, r: RelationId) -> DVector<f64> {
        self.frozen.embeddings.row(self.dims.num_entities + r.0).transpose()
    }

    /// SHA-256 over the frozen matrices `(E, U, V)`.
    pub fn frozen_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for m in [&self.frozen.embeddings, &self.frozen.mlp_in, &self.frozen.value] {
            h.update((m.nrows() as u64).to_le_bytes());
            h.update((m.ncols() as u64).to_le_bytes());
            for v in m.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn check_prompt(&self, prompt: &Prompt) -> Result<()> {
        prompt.check_range(self.dims.num_entities, self.dims.num_relations)
    }
}

/// Post-ReLU hidden activation `φ`, length `m`, componentwise nonnegative.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVec(pub DVector<f64>);

impl Deref for FeatureVec {
    type Target = DVector<f64>;
    fn deref(&self) -> &DVector<f64> {
        &self.0
    }
}

/// Score vector over entities (pre-argmax, no softmax).
#[derive(Clone, Debug, PartialEq)]
pub struct OutputVec(pub DVector<f64>);

impl Deref for OutputVec {
    type Target = DVector<f64>;
    fn deref(&self) -> &DVector<f64> {
        &self.0
    }
}

impl OutputVec {
    pub fn argmax(&self) -> linalg::Argmax {
        argmax(self.0.as_slice())
    }

    /// `true` iff `target` is the unique maximum.
    pub fn predicts(&self, target: EntityId) -> bool {
        let a = self.argmax();
        a.index == target.0 && !a.tied
    }
}

/// Anything that acts as an additive update to `W`.
pub trait WeightDelta {
    /// `(num_entities, m)`
    fn shape(&self) -> (usize, usize);
    /// `ΔW · φ`
    fn apply(&self, phi: &DVector<f64>) -> DVector<f64>;
    fn to_dense(&self) -> DMatrix<f64>;
}

impl WeightDelta for DMatrix<f64> {
    fn shape(&self) -> (usize, usize) {
        DMatrix::shape(self)
    }
    fn apply(&self, phi: &DVector<f64>) -> DVector<f64> {
        self * phi
    }
    fn to_dense(&self) -> DMatrix<f64> {
        self.clone()
    }
}

/// Draws `E`, `V`, then `U` (in that order, row-major) with i.i.d.
/// `N(0, 1/d)` entries; `W` starts at zero. Because `U` is drawn last, row by
/// row, two models with the same seed and different `m` share the leading rows
/// of `U`.
pub fn init_params(dims: ModelDims, seed: u64) -> Result<ModelParams> {
    dims.validate()?;
    let std = 1.0 / (dims.d as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut rng = rng::rng(seed);
    let mut draw = |rows: usize, cols: usize| {
        DMatrix::from_row_iterator(rows, cols, (0..rows * cols).map(|_| normal.sample(&mut rng)).collect::<Vec<_>>())
    };
    let embeddings = draw(dims.vocab(), dims.d);
    let value = draw(dims.d, dims.d);
    let mlp_in = draw(dims.m, dims.d);
    let output = DMatrix::zeros(dims.num_entities, dims.m);
    ModelParams::from_parts(dims, embeddings, mlp_in, value, output, seed)
}

/// Uniform-attention mixing at the last position:
/// `X REL ↦ V e_X + e_REL`, `X REL1 REL2 ↦ (V/2) e_X + (V/2) e_REL1 + e_REL2`.
pub fn mix(params: &ModelParams, prompt: &Prompt) -> Result<DVector<f64>> {
    params.check_prompt(prompt)?;
    let v = params.value();
    Ok(match *prompt {
        Prompt::OneHop { subject, rel } => v * params.entity_embedding(subject) + params.relation_embedding(rel),
        Prompt::TwoHop { subject, rel1, rel2 } => {
            let ex = v * params.entity_embedding(subject);
            let er1 = v * params.relation_embedding(rel1);
            ex * 0.5 + er1 * 0.5 + params.relation_embedding(rel2)
        }
    })
}

/// `ReLU(U x)`
pub fn relu_features(mlp_in: &DMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
    (mlp_in * x).map(|v| v.max(0.0))
}

pub fn features(params: &ModelParams, prompt: &Prompt) -> Result<FeatureVec> {
    Ok(FeatureVec(relu_features(params.mlp_in(), &mix(params, prompt)?)))
}

/// Features of several prompts as the columns of an `m × k` matrix.
pub fn feature_matrix(params: &ModelParams, prompts: &[Prompt]) -> Result<DMatrix<f64>> {
    let mut mixed = DMatrix::zeros(params.dims.d, prompts.len());
    for (j, p) in prompts.iter().enumerate() {
        mixed.set_column(j, &mix(params, p)?);
    }
    Ok((params.mlp_in() * mixed).map(|v| v.max(0.0)))
}

/// `(W + ΔW) · φ(prompt)`
pub fn forward(params: &ModelParams, prompt: &Prompt, delta: Option<&dyn WeightDelta>) -> Result<OutputVec> {
    let phi = features(params, prompt)?;
    forward_features(params, &phi, delta)
}

pub fn forward_features(
    params: &ModelParams,
    phi: &DVector<f64>,
    delta: Option<&dyn WeightDelta>,
) -> Result<OutputVec> {
    if phi.len() != params.dims.m {
        return Err(Error::shape(format!("feature length {} != m = {}", phi.len(), params.dims.m)));
    }
    let mut out = &params.output * phi;
    if let Some(delta) = delta {
        let expected = (params.dims.num_entities, params.dims.m);
        if delta.shape() != expected {
            return Err(Error::shape(format!("delta is {:?}, expected {expected:?}", delta.shape())));
        }
        out += delta.apply(phi);
    }
    Ok(OutputVec(out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    /// Nothing to fit.
    Unchanged,
    Cholesky,
    /// SVD pseudo-inverse (minimum-norm least squares).
    Pseudoinverse,
}

#[derive(Clone, Debug)]
pub struct Fit {
    pub weights: DMatrix<f64>,
    pub solver: Solver,
    /// `true` when the `k × k` dual system was solved instead of the `m × m` primal.
    pub dual: bool,
    pub warnings: Vec<String>,
}

/// Ridge fit of the readout:
/// `W = argmin Σ_k ‖W φ_k − i_{y_k}‖² + λ ‖W‖²_F`.
///
/// Solves whichever normal-equation system is smaller (`m × m` primal or
/// `k × k` dual Gram) by Cholesky, falling back to the SVD pseudo-inverse. At
/// `λ = 0` this is the minimum-norm least-squares solution. An empty fact list
/// returns the current `W`.
pub fn fit_w(params: &ModelParams, facts: &[(Prompt, EntityId)], ridge: f64) -> Result<Fit> {
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::param(format!("ridge must be finite and >= 0, got {ridge}")));
    }
    if facts.is_empty() {
        return Ok(Fit { weights: params.output.clone(), solver: Solver::Unchanged, dual: true, warnings: vec![] });
    }
    let dims = params.dims;
    let mut warnings = Vec::new();
    if facts.len() > dims.m {
        warnings.push(format!(
            "{} facts exceed hidden width m = {}; exact storage is not expected",
            facts.len(),
            dims.m
        ));
    }
    let prompts: Vec<Prompt> = facts.iter().map(|(p, _)| *p).collect();
    for (p, y) in facts {
        if y.0 >= dims.num_entities {
            return Err(Error::param(format!("target {y} of `{p}` out of range")));
        }
    }
    let phi = feature_matrix(params, &prompts)?;
    let k = facts.len();
    let mut targets = DMatrix::zeros(dims.num_entities, k);
    for (j, (_, y)) in facts.iter().enumerate() {
        targets[(y.0, j)] = 1.0;
    }

    if k <= dims.m {
        let mut gram = phi.transpose() * &phi;
        if ridge == 0.0 {
            if let Some((a, b)) = duplicate_columns(&gram) {
                return Err(Error::Numerical(format!(
                    "singular feature Gram at ridge 0: prompts `{}` and `{}` have identical features",
                    prompts[a], prompts[b]
                )));
            }
        }
        for i in 0..k {
            gram[(i, i)] += ridge;
        }
        // W = Y (K + λI)^{-1} Φᵀ
        let rhs = targets.transpose();
        let (coef_t, solver) = match linalg::solve_spd(&gram, &rhs) {
            Some(x) => (x, Solver::Cholesky),
            None => (linalg::lstsq_min_norm(&gram, &rhs).0, Solver::Pseudoinverse),
        };
        let weights = coef_t.transpose() * phi.transpose();
        Ok(Fit { weights, solver, dual: true, warnings })
    } else {
        let mut cov = &phi * phi.transpose();
        for i in 0..dims.m {
            cov[(i, i)] += ridge;
        }
        // Wᵀ = (ΦΦᵀ + λI)^{-1} Φ Yᵀ
        let rhs = &phi * targets.transpose();
        let (wt, solver) = match linalg::solve_spd(&cov, &rhs) {
            Some(x) => (x, Solver::Cholesky),
            None => (linalg::lstsq_min_norm(&cov, &rhs).0, Solver::Pseudoinverse),
        };
        Ok(Fit { weights: wt.transpose(), solver, dual: false, warnings })
    }
}

fn duplicate_columns(gram: &DMatrix<f64>) -> Option<(usize, usize)> {
    let k = gram.nrows();
    for i in 0..k {
        for j in i + 1..k {
            let scale = gram[(i, i)].max(gram[(j, j)]);
            let dist2 = gram[(i, i)] + gram[(j, j)] - 2.0 * gram[(i, j)];
            if dist2 <= 1e-12 * scale {
                return Some((i, j));
            }
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    /// Fraction of prompts whose target is the unique argmax. Ties count as failures.
    pub accuracy: f64,
    /// Fraction of prompts whose target is the lowest-index argmax.
    pub tie_break_accuracy: f64,
    /// Prompts whose maximum score is attained more than once.
    pub ties: usize,
    pub total: usize,
}

impl fmt::Display for RecallReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "accuracy {:.4} over {} prompts", self.accuracy, self.total)?;
        if self.ties > 0 {
            write!(f, " (warning: {} tied argmax, lowest-index accuracy {:.4})", self.ties, self.tie_break_accuracy)?;
        }
        Ok(())
    }
}

pub fn recall_accuracy(params: &ModelParams, eval: &[(Prompt, EntityId)]) -> Result<RecallReport> {
    recall_with(params, eval, None)
}

/// Recall accuracy with an optional adapter delta applied.
pub fn recall_with(
    params: &ModelParams,
    eval: &[(Prompt, EntityId)],
    delta: Option<&dyn WeightDelta>,
) -> Result<RecallReport> {
    if eval.is_empty() {
        return Err(Error::param("recall_accuracy needs a nonempty evaluation list"));
    }
    let prompts: Vec<Prompt> = eval.iter().map(|(p, _)| *p).collect();
    let phi = feature_matrix(params, &prompts)?;
    let (mut hits, mut lenient, mut ties) = (0usize, 0usize, 0usize);
    for (j, (_, y)) in eval.iter().enumerate() {
        let out = forward_features(params, &phi.column(j).into_owned(), delta)?;
        let a = out.argmax();
        ties += a.tied as usize;
        lenient += (a.index == y.0) as usize;
        hits += (a.index == y.0 && !a.tied) as usize;
    }
    let n = eval.len() as f64;
    Ok(RecallReport {
        accuracy: hits as f64 / n,
        tie_break_accuracy: lenient as f64 / n,
        ties,
        total: eval.len(),
    })
}
