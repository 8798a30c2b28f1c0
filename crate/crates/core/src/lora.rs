//! Closed-form low-rank edits of the readout `W`.
//!
//! An edit asks that `(W + ΔW) φ_k = i_{new,k}` on each edit prompt while
//! `‖A‖²_F + ‖B‖²_F` is minimal over factorizations `ΔW = A Bᵀ`. For a single
//! prompt the minimizer is `ΔW = (1/‖φ‖²) w φᵀ`; for several prompts with
//! independent features it is `ΔW = D G⁻¹ Pᵀ` with `P = [φ_1 … φ_k]`,
//! `G = PᵀP`, and `D` the required output changes.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, one_hot};
use crate::model::{feature_matrix, features, forward_features, ModelParams, WeightDelta};
use crate::rng;
use crate::world::{EntityId, FactEdit, Prompt};

/// Features with norm at or below this are treated as dead.
pub const FEATURE_EPS: f64 = 1e-10;
/// Largest Gram condition number accepted by [`multi_fact_edit`].
pub const GRAM_CONDITION_CAP: f64 = 1e12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    /// Output change `i_new − i_old`; requires the model to predict `old` first.
    PaperStrict,
    /// Output change `i_new − W φ`, so the edited output is exactly `i_new`.
    #[default]
    ExactRedirect,
}

impl EditMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EditMode::PaperStrict => "paper_strict",
            EditMode::ExactRedirect => "exact_redirect",
        }
    }
}

impl FromStr for EditMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_strict" | "paper-strict" | "strict" => Ok(EditMode::PaperStrict),
            "exact_redirect" | "exact-redirect" | "exact" => Ok(EditMode::ExactRedirect),
            _ => Err(Error::Parse(format!("unknown edit mode `{s}`"))),
        }
    }
}

/// One requested output change. `old_target` is what the base model is
/// expected to predict; it may be absent for facts the base model never stored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edit {
    pub prompt: Prompt,
    pub old_target: Option<EntityId>,
    pub new_target: EntityId,
}

impl From<FactEdit> for Edit {
    fn from(e: FactEdit) -> Self {
        Edit { prompt: e.prompt(), old_target: Some(e.old_target), new_target: e.new_target }
    }
}

/// `ΔW = out_factor · in_factorᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    out_factor: DMatrix<f64>,
    in_factor: DMatrix<f64>,
    provenance: Vec<Edit>,
    mode: EditMode,
}

impl Adapter {
    pub fn new(
        out_factor: DMatrix<f64>,
        in_factor: DMatrix<f64>,
        provenance: Vec<Edit>,
        mode: EditMode,
    ) -> Result<Self> {
        if out_factor.ncols() != in_factor.ncols() || out_factor.ncols() == 0 {
            return Err(Error::shape(format!(
                "factor ranks differ or are zero: {} vs {}",
                out_factor.ncols(),
                in_factor.ncols()
            )));
        }
        if provenance.is_empty() {
            return Err(Error::param("adapter provenance must be nonempty"));
        }
        Ok(Adapter { out_factor, in_factor, provenance, mode })
    }

    pub fn rank(&self) -> usize {
        self.out_factor.ncols()
    }

    /// `(num_entities, m)`
    pub fn dims(&self) -> (usize, usize) {
        (self.out_factor.nrows(), self.in_factor.nrows())
    }

    pub fn out_factor(&self) -> &DMatrix<f64> {
        &self.out_factor
    }

    pub fn in_factor(&self) -> &DMatrix<f64> {
        &self.in_factor
    }

    pub fn provenance(&self) -> &[Edit] {
        &self.provenance
    }

    pub fn mode(&self) -> EditMode {
        self.mode
    }

    pub fn delta(&self) -> DMatrix<f64> {
        &self.out_factor * self.in_factor.transpose()
    }

    /// Same `ΔW`, factors regauged to `(c·A, B/c)`.
    pub fn rescaled(&self, c: f64) -> Adapter {
        Adapter {
            out_factor: &self.out_factor * c,
            in_factor: &self.in_factor / c,
            provenance: self.provenance.clone(),
            mode: self.mode,
        }
    }

    /// Adapter with `−ΔW`.
    pub fn negated(&self) -> Adapter {
        Adapter { out_factor: -&self.out_factor, ..self.clone() }
    }

    /// Provenance as `(prompt, new_target)` pairs.
    pub fn targets(&self) -> Vec<(Prompt, EntityId)> {
        self.provenance.iter().map(|e| (e.prompt, e.new_target)).collect()
    }
}

impl WeightDelta for Adapter {
    fn shape(&self) -> (usize, usize) {
        self.dims()
    }
    fn apply(&self, phi: &DVector<f64>) -> DVector<f64> {
        &self.out_factor * (self.in_factor.transpose() * phi)
    }
    fn to_dense(&self) -> DMatrix<f64> {
        self.delta()
    }
}

fn check_features(prompt: &Prompt, phi: &DVector<f64>) -> Result<f64> {
    let norm = phi.norm();
    if norm <= FEATURE_EPS {
        return Err(Error::DegenerateFeatures { prompt: prompt.to_string(), norm, eps: FEATURE_EPS });
    }
    Ok(norm)
}

/// Required output change on one prompt.
fn output_change(params: &ModelParams, edit: &Edit, phi: &DVector<f64>, mode: EditMode) -> Result<DVector<f64>> {
    let n = params.dims().num_entities;
    if edit.new_target.0 >= n {
        return Err(Error::param(format!("new target {} out of range", edit.new_target)));
    }
    match mode {
        EditMode::PaperStrict => {
            let old = edit.old_target.ok_or_else(|| {
                Error::param(format!("paper-strict edit on `{}` needs an old target", edit.prompt))
            })?;
            if old.0 >= n {
                return Err(Error::param(format!("old target {old} out of range")));
            }
            let out = forward_features(params, phi, None)?;
            if !out.predicts(old) {
                let a = out.argmax();
                return Err(Error::StaleBaseFact {
                    prompt: edit.prompt.to_string(),
                    expected: old.0,
                    actual: if a.tied { format!("tie at x{}", a.index) } else { format!("x{}", a.index) },
                });
            }
            Ok(one_hot(n, edit.new_target.0) - one_hot(n, old.0))
        }
        EditMode::ExactRedirect => {
            Ok(one_hot(n, edit.new_target.0) - forward_features(params, phi, None)?.0)
        }
    }
}

/// Minimum-penalty rank-one edit redirecting `prompt` to `new_target`.
///
/// `ΔW = (1/‖φ‖²) w φᵀ` with `w = i_new − i_old` (paper-strict) or
/// `w = i_new − Wφ` (exact redirect). The two stored factors are
/// multiples of `w` and `φ` with equal norms.
pub fn rank_one_edit(
    params: &ModelParams,
    prompt: &Prompt,
    old_target: Option<EntityId>,
    new_target: EntityId,
    mode: EditMode,
) -> Result<Adapter> {
    let edit = Edit { prompt: *prompt, old_target, new_target };
    let phi = features(params, prompt)?.0;
    let phi_norm = check_features(prompt, &phi)?;
    let w = output_change(params, &edit, &phi, mode)?;
    let w_norm = w.norm();
    let (out, inp) = if w_norm == 0.0 {
        (DVector::zeros(w.len()), DVector::zeros(phi.len()))
    } else {
        // out = w c / ‖φ‖², in = φ / c with c² = ‖φ‖³ / ‖w‖ balances the norms.
        let c = (phi_norm.powi(3) / w_norm).sqrt();
        (&w * (c / (phi_norm * phi_norm)), &phi / c)
    };
    Adapter::new(
        DMatrix::from_column_slice(out.len(), 1, out.as_slice()),
        DMatrix::from_column_slice(inp.len(), 1, inp.as_slice()),
        vec![edit],
        mode,
    )
}

/// Minimum-penalty interpolating edit over several prompts:
/// `ΔW = D G⁻¹ Pᵀ`, stored in the SVD gauge `A = U√Σ`, `B = V√Σ` (columns of
/// `A` and `B` have equal norms, and `‖A‖² + ‖B‖² = 2‖ΔW‖_*`).
pub fn multi_fact_edit(params: &ModelParams, edits: &[Edit], mode: EditMode) -> Result<Adapter> {
    if edits.is_empty() {
        return Err(Error::param("multi_fact_edit needs at least one edit"));
    }
    let prompts: Vec<Prompt> = edits.iter().map(|e| e.prompt).collect();
    let p = feature_matrix(params, &prompts)?;
    let n = params.dims().num_entities;
    let k = edits.len();
    let mut d = DMatrix::zeros(n, k);
    for (j, e) in edits.iter().enumerate() {
        let col = p.column(j).into_owned();
        check_features(&e.prompt, &col)?;
        d.set_column(j, &output_change(params, e, &col, mode)?);
    }
    let gram = p.transpose() * &p;
    let condition = linalg::spd_condition(&gram);
    if !(condition < GRAM_CONDITION_CAP) {
        return Err(Error::SingularGram { condition });
    }
    let chol = gram.cholesky().ok_or(Error::SingularGram { condition })?;
    // B = P G⁻¹ (m × k), ΔW = D Bᵀ
    let b = chol.solve(&p.transpose()).transpose();
    let (out, inp) = balanced_factors(&d, &b);
    Adapter::new(out, inp, edits.to_vec(), mode)
}

/// Factors `D Bᵀ` as `A Cᵀ` with `A = U√Σ`, `C = Q V √Σ` from `B = QR` and the
/// SVD of the small matrix `D Rᵀ`.
pub(crate) fn balanced_factors(d: &DMatrix<f64>, b: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let qr = b.clone().qr();
    let (q, r) = (qr.q(), qr.r());
    let small = d * r.transpose();
    let svd = small.svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v requested");
    let sqrt_s = DMatrix::from_diagonal(&svd.singular_values.map(f64::sqrt));
    let s = svd.singular_values.len();
    let k = b.ncols();
    // Keep rank-k storage even when fewer singular values exist (more edits than entities).
    let out = linalg::pad_columns(&(u * &sqrt_s), k.max(s));
    let inp = linalg::pad_columns(&(q * vt.transpose() * sqrt_s), k.max(s));
    (out, inp)
}

/// `‖out_factor‖²_F + ‖in_factor‖²_F`
pub fn penalty(adapter: &Adapter) -> f64 {
    adapter.out_factor.norm_squared() + adapter.in_factor.norm_squared()
}

#[derive(Clone, Debug)]
pub struct OracleOptions {
    pub max_iter: usize,
    /// Stop once `‖∇J‖ ≤ grad_tol · (1 + J)`.
    pub grad_tol: f64,
    pub seed: u64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions { max_iter: 50_000, grad_tol: 1e-11, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct OracleResult {
    pub penalty: f64,
    pub cosine_q_phi: f64,
    pub iterations: usize,
    pub p: DVector<f64>,
    pub q: DVector<f64>,
}

/// Numerical minimum of `‖p‖² + ‖q‖²` subject to `p qᵀ v = w`.
///
/// Reduced-gradient descent: for a given `q` the constraint fixes
/// `p = w / (qᵀv)`, so the search runs over `q ∈ ℝ^m` on
/// `J(q) = ‖w‖²/(qᵀv)² + ‖q‖²` with Armijo backtracking from a random start.
/// Every iterate is feasible, so the returned penalty never undercuts the true
/// constrained minimum.
pub fn minimize_rank_one_penalty(v: &DVector<f64>, w: &DVector<f64>, opts: &OracleOptions) -> Result<OracleResult> {
    let w2 = w.norm_squared();
    if w2 == 0.0 {
        return Err(Error::param("target difference is zero; the minimal adapter is trivially zero"));
    }
    if v.norm() <= FEATURE_EPS {
        return Err(Error::DegenerateFeatures { prompt: "<oracle>".into(), norm: v.norm(), eps: FEATURE_EPS });
    }
    let objective = |q: &DVector<f64>| {
        let s = q.dot(v);
        if s == 0.0 {
            f64::INFINITY
        } else {
            w2 / (s * s) + q.norm_squared()
        }
    };
    let mut r = rng::rng(opts.seed);
    let mut q = DVector::from_iterator(v.len(), (0..v.len()).map(|_| StandardNormal.sample(&mut r)));
    q /= q.norm();
    if q.dot(v).abs() < 1e-3 * v.norm() {
        q += v * (0.1 / v.norm());
    }
    let mut j = objective(&q);
    // Near the minimum the Hessian eigenvalues are 8 (along v) and 2, whatever
    // the scale of v and w, so 2/(8+2) is the best fixed step and the cap.
    let mut step: f64 = 0.2;
    let mut trace = Vec::new();
    let gradient = |q: &DVector<f64>| {
        let s = q.dot(v);
        v * (-2.0 * w2 / (s * s * s)) + q * 2.0
    };
    for it in 0..opts.max_iter {
        let s = q.dot(v);
        let grad = gradient(&q);
        let gn2 = grad.norm_squared();
        if gn2.sqrt() <= opts.grad_tol * (1.0 + j) {
            let p = w / s;
            let penalty = p.norm_squared() + q.norm_squared();
            let cosine_q_phi = s.abs() / (q.norm() * v.norm());
            return Ok(OracleResult { penalty, cosine_q_phi, iterations: it, p, q });
        }
        step = (step * 2.0).min(0.2);
        loop {
            let cand = &q - &grad * step;
            let jc = objective(&cand);
            // Once J is flat to rounding, accept steps that shrink the gradient instead.
            let flat = jc <= j + 4.0 * f64::EPSILON * j.abs() && gradient(&cand).norm_squared() < gn2;
            if jc <= j - 1e-4 * step * gn2 || flat {
                q = cand;
                j = jc;
                break;
            }
            step *= 0.5;
            if step < 1e-300 {
                trace.push(j);
                return Err(Error::OracleFailed { iterations: it, trace });
            }
        }
        trace.push(j);
        if trace.len() > 8 {
            trace.remove(0);
        }
    }
    Err(Error::OracleFailed { iterations: opts.max_iter, trace })
}

/// Runs [`minimize_rank_one_penalty`] for the paper-strict change
/// `i_new − i_old` on `prompt`. Returns `(penalty, |cos∠(q, φ)|)`.
pub fn minimality_oracle(
    params: &ModelParams,
    prompt: &Prompt,
    old_target: EntityId,
    new_target: EntityId,
) -> Result<(f64, f64)> {
    let dims = params.dims();
    if dims.d > 32 || dims.m > 256 {
        return Err(Error::param(format!(
            "minimality oracle is limited to d <= 32, m <= 256 (got d = {}, m = {})",
            dims.d, dims.m
        )));
    }
    let n = dims.num_entities;
    if old_target.0 >= n || new_target.0 >= n {
        return Err(Error::param("oracle targets out of range"));
    }
    let phi = features(params, prompt)?.0;
    check_features(prompt, &phi)?;
    let w = one_hot(n, new_target.0) - one_hot(n, old_target.0);
    let opts = OracleOptions { seed: params.seed() ^ 0x5eed, ..Default::default() };
    let res = minimize_rank_one_penalty(&phi, &w, &opts)?;
    Ok((res.penalty, res.cosine_q_phi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_params, ModelDims};
    use crate::world::{gen_world, RelationId};

    fn fitted(d: usize, m: usize, seed: u64) -> (ModelParams, crate::world::World) {
        let w = gen_world(8, 3, 1.0, seed).unwrap();
        let p = init_params(ModelDims::new(d, m, 8, 3).unwrap(), seed + 100).unwrap();
        (p.fitted(&w.one_hop_facts(), 1e-10).unwrap(), w)
    }

    fn fact(w: &crate::world::World, x: usize, r: usize) -> (Prompt, EntityId) {
        let p = Prompt::one_hop(EntityId(x), RelationId(r));
        (p, w.answer(&p).unwrap())
    }

    fn other(n: usize, t: EntityId) -> EntityId {
        EntityId((t.0 + 1) % n)
    }

    #[test]
    fn noop_strict_edit_is_zero() {
        let (p, w) = fitted(16, 128, 1);
        let (prompt, y) = fact(&w, 2, 1);
        let a = rank_one_edit(&p, &prompt, Some(y), y, EditMode::PaperStrict).unwrap();
        assert!(a.delta().iter().all(|&v| v == 0.0));
        assert_eq!(penalty(&a), 0.0);
    }

    #[test]
    fn strict_edit_matches_closed_form_and_telescopes() {
        let (p, w) = fitted(16, 128, 2);
        let (prompt, y) = fact(&w, 3, 0);
        let new = other(8, y);
        let a = rank_one_edit(&p, &prompt, Some(y), new, EditMode::PaperStrict).unwrap();
        // independent dense recomputation
        let phi = features(&p, &prompt).unwrap();
        let nrm2: f64 = phi.iter().map(|v| v * v).sum();
        let dense = a.delta();
        for i in 0..8 {
            let wi = (i == new.0) as i32 as f64 - (i == y.0) as i32 as f64;
            for j in 0..128 {
                assert!((dense[(i, j)] - wi * phi[j] / nrm2).abs() < 1e-12);
            }
        }
        let out = forward(&p, &prompt, Some(&a)).unwrap();
        assert!((&out.0 - one_hot(8, new.0)).amax() < 1e-8);
        assert!((a.out_factor.norm() - a.in_factor.norm()).abs() < 1e-12);
    }

    #[test]
    fn strict_edit_preconditions() {
        let (p, w) = fitted(16, 128, 3);
        let (prompt, y) = fact(&w, 1, 2);
        let wrong = other(8, y);
        assert!(matches!(
            rank_one_edit(&p, &prompt, Some(wrong), y, EditMode::PaperStrict),
            Err(Error::StaleBaseFact { .. })
        ));
        assert!(rank_one_edit(&p, &prompt, None, y, EditMode::PaperStrict).is_err());
        // exact redirect does not care about the base prediction
        rank_one_edit(&p, &prompt, Some(wrong), y, EditMode::ExactRedirect).unwrap();
    }

    #[test]
    fn dead_features_are_rejected() {
        let (p, _) = fitted(8, 16, 4);
        let zero_u = ModelParams::from_parts(
            p.dims(),
            p.embeddings().clone(),
            DMatrix::zeros(16, 8),
            p.value().clone(),
            p.output().clone(),
            0,
        )
        .unwrap();
        let prompt = Prompt::one_hop(EntityId(0), RelationId(0));
        assert!(matches!(
            rank_one_edit(&zero_u, &prompt, None, EntityId(1), EditMode::ExactRedirect),
            Err(Error::DegenerateFeatures { .. })
        ));
    }

    #[test]
    fn exact_redirect_is_exact_on_an_unfitted_model() {
        let p = init_params(ModelDims::new(16, 64, 8, 3).unwrap(), 5).unwrap();
        let prompt = Prompt::two_hop(EntityId(4), RelationId(0), RelationId(2));
        let a = rank_one_edit(&p, &prompt, None, EntityId(6), EditMode::ExactRedirect).unwrap();
        let out = forward(&p, &prompt, Some(&a)).unwrap();
        assert!((&out.0 - one_hot(8, 6)).amax() <= 1e-8);
    }

    #[test]
    fn multi_fact_reduces_to_rank_one_for_a_single_edit() {
        let (p, w) = fitted(16, 128, 6);
        let (prompt, y) = fact(&w, 5, 1);
        let e = Edit { prompt, old_target: Some(y), new_target: other(8, y) };
        for mode in [EditMode::PaperStrict, EditMode::ExactRedirect] {
            let one = rank_one_edit(&p, &prompt, e.old_target, e.new_target, mode).unwrap();
            let multi = multi_fact_edit(&p, &[e], mode).unwrap();
            assert_eq!(multi.rank(), 1);
            assert!((one.delta() - multi.delta()).amax() < 1e-13);
            assert!((penalty(&one) - penalty(&multi)).abs() < 1e-10);
        }
    }

    #[test]
    fn two_fact_edit_matches_explicit_gram_display() {
        let (p, w) = fitted(16, 128, 7);
        let (p1, y1) = fact(&w, 2, 1);
        let (p2, y2) = fact(&w, 6, 1);
        let e1 = Edit { prompt: p1, old_target: Some(y1), new_target: other(8, y1) };
        let e2 = Edit { prompt: p2, old_target: Some(y2), new_target: other(8, other(8, y2)) };
        let a = multi_fact_edit(&p, &[e1, e2], EditMode::PaperStrict).unwrap();
        assert_eq!(a.rank(), 2);

        let r1 = features(&p, &p1).unwrap().0;
        let r2 = features(&p, &p2).unwrap().0;
        let (g11, g12, g22) = (r1.dot(&r1), r1.dot(&r2), r2.dot(&r2));
        let det = g11 * g22 - g12 * g12;
        let inv = [[g22 / det, -g12 / det], [-g12 / det, g11 / det]];
        let w1 = one_hot(8, e1.new_target.0) - one_hot(8, y1.0);
        let w2 = one_hot(8, e2.new_target.0) - one_hot(8, y2.0);
        // [w1 w2] Ginv [r1 r2]ᵀ
        let c1 = &r1 * inv[0][0] + &r2 * inv[1][0];
        let c2 = &r1 * inv[0][1] + &r2 * inv[1][1];
        let dense = &w1 * c1.transpose() + &w2 * c2.transpose();
        assert!((a.delta() - dense).amax() < 1e-12);

        let ex = multi_fact_edit(&p, &[e1, e2], EditMode::ExactRedirect).unwrap();
        for (prompt, e) in [(p1, e1), (p2, e2)] {
            let out = forward(&p, &prompt, Some(&ex)).unwrap();
            assert!((&out.0 - one_hot(8, e.new_target.0)).amax() <= 1e-8);
        }
    }

    #[test]
    fn repeated_prompt_gives_singular_gram() {
        let (p, w) = fitted(16, 128, 8);
        let (prompt, y) = fact(&w, 2, 1);
        let e = Edit { prompt, old_target: Some(y), new_target: other(8, y) };
        assert!(matches!(
            multi_fact_edit(&p, &[e, e], EditMode::ExactRedirect),
            Err(Error::SingularGram { .. })
        ));
        assert!(multi_fact_edit(&p, &[], EditMode::ExactRedirect).is_err());
    }

    #[test]
    fn in_factor_lies_in_edit_feature_span() {
        let (p, w) = fitted(16, 128, 9);
        let edits: Vec<Edit> = [(1, 0), (3, 0), (4, 2)]
            .iter()
            .map(|&(x, r)| {
                let (prompt, y) = fact(&w, x, r);
                Edit { prompt, old_target: Some(y), new_target: other(8, y) }
            })
            .collect();
        let a = multi_fact_edit(&p, &edits, EditMode::ExactRedirect).unwrap();
        let pm = feature_matrix(&p, &edits.iter().map(|e| e.prompt).collect::<Vec<_>>()).unwrap();
        let proj = &pm * (pm.transpose() * &pm).try_inverse().unwrap() * pm.transpose();
        let resid = a.in_factor() - &proj * a.in_factor();
        assert!(resid.amax() <= 1e-8 * a.in_factor().amax().max(1.0));
    }

    #[test]
    fn locality_bound_holds_for_other_stored_prompts() {
        let (p, w) = fitted(16, 128, 10);
        let (prompt, y) = fact(&w, 0, 0);
        let a = rank_one_edit(&p, &prompt, Some(y), other(8, y), EditMode::PaperStrict).unwrap();
        let phi = features(&p, &prompt).unwrap().0;
        for (q, _) in w.one_hop_facts() {
            if q == prompt {
                continue;
            }
            let psi = features(&p, &q).unwrap().0;
            let bound = phi.dot(&psi).abs() / phi.norm_squared();
            let change = forward(&p, &q, Some(&a)).unwrap().0 - forward(&p, &q, None).unwrap().0;
            assert!(change.amax() <= bound + 1e-12);
        }
    }

    #[test]
    fn regauging_leaves_outputs_unchanged() {
        let (p, w) = fitted(16, 128, 11);
        let (prompt, y) = fact(&w, 3, 2);
        let a = rank_one_edit(&p, &prompt, Some(y), other(8, y), EditMode::ExactRedirect).unwrap();
        let b = a.rescaled(3.7);
        assert!((a.delta() - b.delta()).amax() <= 1e-12);
        let q = Prompt::one_hop(EntityId(5), RelationId(1));
        let d = forward(&p, &q, Some(&a)).unwrap().0 - forward(&p, &q, Some(&b)).unwrap().0;
        assert!(d.amax() <= 1e-12);
    }

    #[test]
    fn balanced_penalty_equals_twice_norm_product() {
        let (p, w) = fitted(16, 128, 12);
        let (prompt, y) = fact(&w, 1, 1);
        let a = rank_one_edit(&p, &prompt, Some(y), other(8, y), EditMode::PaperStrict).unwrap();
        let (pn, qn) = (a.out_factor().norm(), a.in_factor().norm());
        assert!((penalty(&a) - 2.0 * pn * qn).abs() < 1e-12);
        assert!(penalty(&Adapter::new(DMatrix::zeros(8, 1), DMatrix::zeros(128, 1), a.provenance().to_vec(), a.mode()).unwrap()) == 0.0);
    }

    #[test]
    fn unbalanced_gauge_scan_has_minimum_at_balance() {
        // c²‖p‖² + ‖q‖²/c² over a grid of c, computed directly from the factors.
        let (p, w) = fitted(16, 128, 13);
        let (prompt, y) = fact(&w, 6, 0);
        let a = rank_one_edit(&p, &prompt, Some(y), other(8, y), EditMode::PaperStrict).unwrap();
        let base = penalty(&a);
        for i in -20..=20 {
            let c = 1.1f64.powi(i);
            let scanned = penalty(&a.rescaled(c));
            if i == 0 {
                assert!((scanned - base).abs() < 1e-12);
            } else {
                assert!(scanned > base);
            }
        }
    }

    #[test]
    fn oracle_agrees_with_closed_form_on_small_instance() {
        let (p, w) = fitted(16, 64, 14);
        let (prompt, y) = fact(&w, 2, 2);
        let new = other(8, y);
        let closed = penalty(&rank_one_edit(&p, &prompt, Some(y), new, EditMode::PaperStrict).unwrap());
        let (numeric, cos) = minimality_oracle(&p, &prompt, y, new).unwrap();
        assert!(numeric >= closed - 1e-6);
        assert!(closed <= numeric * (1.0 + 1e-4));
        assert!(cos >= 0.999, "{cos}");
    }

    #[test]
    fn oracle_penalty_scales_linearly_with_target_difference() {
        let (p, w) = fitted(16, 64, 15);
        let (prompt, y) = fact(&w, 4, 1);
        let phi = features(&p, &prompt).unwrap().0;
        let wv = one_hot(8, other(8, y).0) - one_hot(8, y.0);
        let opts = OracleOptions::default();
        let one = minimize_rank_one_penalty(&phi, &wv, &opts).unwrap().penalty;
        let two = minimize_rank_one_penalty(&phi, &(&wv * 2.0), &opts).unwrap().penalty;
        assert!((two / one - 2.0).abs() < 1e-6, "{}", two / one);
    }

    #[test]
    fn oracle_refuses_large_models_and_reports_nonconvergence() {
        let (p, w) = fitted(16, 512, 16);
        let (prompt, y) = fact(&w, 0, 0);
        assert!(matches!(minimality_oracle(&p, &prompt, y, other(8, y)), Err(Error::Parameter(_))));
        let v = DVector::from_element(4, 1.0);
        let wv = DVector::from_element(3, 1.0);
        let opts = OracleOptions { max_iter: 1, grad_tol: 0.0, seed: 0 };
        assert!(matches!(minimize_rank_one_penalty(&v, &wv, &opts), Err(Error::OracleFailed { .. })));
    }
}
