//! Combining several adapters into one effective update.
//!
//! With adapters `ΔW_i = O_i I_iᵀ` and weights `α_i`:
//!
//! | strategy        | effective update                     |
//! |-----------------|--------------------------------------|
//! | `Sum`           | `Σ ΔW_i`                             |
//! | `Cat{α}`        | `Σ α_i ΔW_i`                         |
//! | `LinearMerge{α}`| `(Σ α_i O_i)(Σ α_i I_i)ᵀ`            |
//! | `UniformMerge`  | `LinearMerge` with `α_i = 1/n`       |
//! | `Arrow`         | `Cat` (or merge) with routed weights |
//!
//! Arrow scores each adapter by the projection of the query features on the
//! adapter's top right-singular direction and takes a softmax over scores.

use std::borrow::Borrow;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::lora::Adapter;
use crate::model::{features, mix, ModelParams, WeightDelta};
use crate::world::{EntityId, Prompt};

/// Which activation Arrow compares against the adapter prototypes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrowActivation {
    #[default]
    PostRelu,
    PreRelu,
}

/// How Arrow applies its weights once routed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrowCombine {
    /// `Σ w_i ΔW_i`
    #[default]
    Output,
    /// `(Σ w_i O_i)(Σ w_i I_i)ᵀ`
    Merge,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum Combinator {
    Sum,
    #[serde(rename = "uniform")]
    UniformMerge,
    #[serde(rename = "linear")]
    LinearMerge { weights: Vec<f64> },
    Cat {
        #[serde(default)]
        weights: Vec<f64>,
    },
    Arrow {
        #[serde(default = "one")]
        temperature: f64,
        #[serde(default = "yes")]
        use_abs: bool,
        #[serde(default)]
        activation: ArrowActivation,
        #[serde(default)]
        combine: ArrowCombine,
    },
}

impl Combinator {
    pub fn arrow() -> Self {
        Combinator::Arrow {
            temperature: 1.0,
            use_abs: true,
            activation: ArrowActivation::PostRelu,
            combine: ArrowCombine::Output,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Combinator::Sum => "sum",
            Combinator::UniformMerge => "uniform",
            Combinator::LinearMerge { .. } => "linear",
            Combinator::Cat { .. } => "cat",
            Combinator::Arrow { .. } => "arrow",
        }
    }

    pub fn validate(&self, adapters: usize) -> Result<()> {
        match self {
            Combinator::LinearMerge { weights } | Combinator::Cat { weights } if weights.len() != adapters => {
                Err(Error::param(format!("{} weights for {adapters} adapters", weights.len())))
            }
            Combinator::Arrow { temperature, .. } if !(*temperature > 0.0) => {
                Err(Error::param(format!("arrow temperature must be > 0, got {temperature}")))
            }
            _ => Ok(()),
        }
    }
}

/// Effective update produced by [`combine`], kept in factored form.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutedDelta {
    pub out_factor: DMatrix<f64>,
    pub in_factor: DMatrix<f64>,
    pub weights: Vec<f64>,
    /// Arrow prototype scores, one per adapter.
    pub similarities: Option<Vec<f64>>,
}

impl RoutedDelta {
    pub fn delta(&self) -> DMatrix<f64> {
        &self.out_factor * self.in_factor.transpose()
    }
}

impl WeightDelta for RoutedDelta {
    fn shape(&self) -> (usize, usize) {
        (self.out_factor.nrows(), self.in_factor.nrows())
    }
    fn apply(&self, phi: &DVector<f64>) -> DVector<f64> {
        &self.out_factor * (self.in_factor.transpose() * phi)
    }
    fn to_dense(&self) -> DMatrix<f64> {
        self.delta()
    }
}

fn check_library<A: Borrow<Adapter>>(adapters: &[A]) -> Result<(usize, usize)> {
    let first = adapters.first().ok_or_else(|| Error::param("no adapters to combine"))?.borrow().dims();
    for a in adapters {
        if a.borrow().dims() != first {
            return Err(Error::shape(format!("adapter dims {:?} != {:?}", a.borrow().dims(), first)));
        }
    }
    Ok(first)
}

fn weighted_concat<A: Borrow<Adapter>>(adapters: &[A], weights: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = adapters[0].borrow().dims();
    let total: usize = adapters.iter().map(|a| a.borrow().rank()).sum();
    let mut out = DMatrix::zeros(n, total);
    let mut inp = DMatrix::zeros(m, total);
    let mut col = 0;
    for (a, &w) in adapters.iter().zip(weights) {
        let a = a.borrow();
        let s = a.rank();
        out.columns_mut(col, s).copy_from(&(a.out_factor() * w));
        inp.columns_mut(col, s).copy_from(a.in_factor());
        col += s;
    }
    (out, inp)
}

fn weighted_merge<A: Borrow<Adapter>>(adapters: &[A], weights: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = adapters[0].borrow().dims();
    let rank = adapters.iter().map(|a| a.borrow().rank()).max().unwrap_or(0);
    let mut out = DMatrix::zeros(n, rank);
    let mut inp = DMatrix::zeros(m, rank);
    for (a, &w) in adapters.iter().zip(weights) {
        let a = a.borrow();
        out += linalg::pad_columns(a.out_factor(), rank) * w;
        inp += linalg::pad_columns(a.in_factor(), rank) * w;
    }
    (out, inp)
}

/// Combines `adapters` under `combinator`. Arrow needs `query` features.
pub fn combine<A: Borrow<Adapter>>(
    adapters: &[A],
    combinator: &Combinator,
    query: Option<&DVector<f64>>,
) -> Result<RoutedDelta> {
    check_library(adapters)?;
    combinator.validate(adapters.len())?;
    let n = adapters.len();
    let routed = |(out_factor, in_factor): (DMatrix<f64>, DMatrix<f64>), weights: Vec<f64>, sims| RoutedDelta {
        out_factor,
        in_factor,
        weights,
        similarities: sims,
    };
    Ok(match combinator {
        Combinator::Sum => {
            let w = vec![1.0; n];
            routed(weighted_concat(adapters, &w), w, None)
        }
        Combinator::Cat { weights } => routed(weighted_concat(adapters, weights), weights.clone(), None),
        Combinator::UniformMerge => {
            let w = vec![1.0 / n as f64; n];
            routed(weighted_merge(adapters, &w), w, None)
        }
        Combinator::LinearMerge { weights } => routed(weighted_merge(adapters, weights), weights.clone(), None),
        Combinator::Arrow { .. } => {
            let protos = arrow_prototypes(adapters)?;
            return combine_routed(adapters, combinator, query, &protos);
        }
    })
}

/// Arrow combination with precomputed [`arrow_prototypes`], for routing many
/// queries over one library.
pub fn combine_routed<A: Borrow<Adapter>>(
    adapters: &[A],
    combinator: &Combinator,
    query: Option<&DVector<f64>>,
    prototypes: &[DVector<f64>],
) -> Result<RoutedDelta> {
    let (_, m) = check_library(adapters)?;
    combinator.validate(adapters.len())?;
    let Combinator::Arrow { temperature, use_abs, combine, .. } = combinator else {
        return Err(Error::param(format!("combine_routed needs an arrow combinator, got {}", combinator.name())));
    };
    if prototypes.len() != adapters.len() {
        return Err(Error::shape(format!("{} prototypes for {} adapters", prototypes.len(), adapters.len())));
    }
    let q = query.ok_or_else(|| Error::param("arrow routing needs query features"))?;
    if q.len() != m {
        return Err(Error::shape(format!("query length {} != m = {m}", q.len())));
    }
    let r = route_with_prototypes(prototypes, q, *temperature, *use_abs)?;
    let (out_factor, in_factor) = match combine {
        ArrowCombine::Output => weighted_concat(adapters, &r.weights),
        ArrowCombine::Merge => weighted_merge(adapters, &r.weights),
    };
    Ok(RoutedDelta { out_factor, in_factor, weights: r.weights, similarities: Some(r.scores) })
}

/// Query vector Arrow compares against prototypes: `φ` or the pre-ReLU `U·mix`.
pub fn arrow_query(params: &ModelParams, prompt: &Prompt, activation: ArrowActivation) -> Result<DVector<f64>> {
    match activation {
        ArrowActivation::PostRelu => Ok(features(params, prompt)?.0),
        ArrowActivation::PreRelu => Ok(params.mlp_in() * mix(params, prompt)?),
    }
}

/// Unit top right-singular vector of `ΔW`, sign fixed so the largest-magnitude
/// entry is positive.
pub fn arrow_prototype(adapter: &Adapter) -> Result<DVector<f64>> {
    let qr = adapter.in_factor().clone().qr();
    let (q, r) = (qr.q(), qr.r());
    let small = adapter.out_factor() * r.transpose();
    let svd = small.svd(false, true);
    let (top, &sigma) = svd
        .singular_values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .ok_or(Error::DegenerateAdapter)?;
    if !(sigma > 0.0) || sigma <= 1e-14 * adapter.out_factor().amax().max(adapter.in_factor().amax()) {
        return Err(Error::DegenerateAdapter);
    }
    let v = svd.v_t.expect("v requested").row(top).transpose();
    let mut proto = q * v;
    proto /= proto.norm();
    Ok(canonical_sign(proto))
}

pub(crate) fn canonical_sign(mut v: DVector<f64>) -> DVector<f64> {
    let idx = v.iter().enumerate().fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
    if v[idx] < 0.0 {
        v.neg_mut();
    }
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArrowRouting {
    pub weights: Vec<f64>,
    pub scores: Vec<f64>,
}

pub fn arrow_prototypes<A: Borrow<Adapter>>(adapters: &[A]) -> Result<Vec<DVector<f64>>> {
    adapters.iter().map(|a| arrow_prototype(a.borrow())).collect()
}

/// `score_i = proto_iᵀ q` (absolute value when `use_abs`),
/// `weights = softmax(score / temperature)`.
pub fn arrow_route<A: Borrow<Adapter>>(
    adapters: &[A],
    query: &DVector<f64>,
    temperature: f64,
    use_abs: bool,
) -> Result<ArrowRouting> {
    check_library(adapters)?;
    route_with_prototypes(&arrow_prototypes(adapters)?, query, temperature, use_abs)
}

pub fn route_with_prototypes(
    prototypes: &[DVector<f64>],
    query: &DVector<f64>,
    temperature: f64,
    use_abs: bool,
) -> Result<ArrowRouting> {
    if prototypes.is_empty() {
        return Err(Error::param("no prototypes to route over"));
    }
    if !(temperature > 0.0) {
        return Err(Error::param(format!("arrow temperature must be > 0, got {temperature}")));
    }
    if let Some(p) = prototypes.iter().find(|p| p.len() != query.len()) {
        return Err(Error::shape(format!("prototype length {} != query length {}", p.len(), query.len())));
    }
    let scores: Vec<f64> = prototypes
        .iter()
        .map(|p| {
            let s = p.dot(query);
            if use_abs {
                s.abs()
            } else {
                s
            }
        })
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / temperature).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(ArrowRouting { weights: exps.iter().map(|e| e / z).collect(), scores })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CatFit {
    pub weights: Vec<f64>,
    /// The least-squares system was rank deficient; `weights` is the minimum-norm solution.
    pub degenerate: bool,
}

/// CAT weights minimizing `Σ_probe ‖(W + Σ α_i ΔW_i) φ − i_target‖²`.
pub fn fit_cat_weights<A: Borrow<Adapter>>(
    params: &ModelParams,
    adapters: &[A],
    probes: &[(Prompt, EntityId)],
) -> Result<CatFit> {
    let (n, m) = check_library(adapters)?;
    if probes.is_empty() {
        return Err(Error::param("fit_cat_weights needs at least one probe"));
    }
    if (n, m) != (params.dims().num_entities, params.dims().m) {
        return Err(Error::shape("adapters do not match the model"));
    }
    let k = adapters.len();
    let mut design = DMatrix::zeros(n * probes.len(), k);
    let mut rhs = DMatrix::zeros(n * probes.len(), 1);
    for (pi, (prompt, target)) in probes.iter().enumerate() {
        if target.0 >= n {
            return Err(Error::param(format!("probe target {target} out of range")));
        }
        let phi = features(params, prompt)?.0;
        let resid = linalg::one_hot(n, target.0) - params.output() * &phi;
        rhs.view_mut((pi * n, 0), (n, 1)).copy_from(&resid);
        for (i, a) in adapters.iter().enumerate() {
            design.view_mut((pi * n, i), (n, 1)).copy_from(&a.borrow().apply(&phi));
        }
    }
    let (x, rank) = linalg::lstsq_min_norm(&design, &rhs);
    Ok(CatFit { weights: x.iter().copied().collect(), degenerate: rank < k })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{multi_fact_edit, rank_one_edit, Edit, EditMode};
    use crate::model::{forward, init_params, ModelDims};
    use crate::world::{gen_world, RelationId, World};

    fn setup(m: usize, seed: u64) -> (ModelParams, World) {
        let w = gen_world(8, 3, 1.0, seed).unwrap();
        let p = init_params(ModelDims::new(16, m, 8, 3).unwrap(), seed + 50).unwrap();
        (p.fitted(&w.one_hop_facts(), 1e-10).unwrap(), w)
    }

    fn edit_on(p: &ModelParams, w: &World, x: usize, r: usize) -> Adapter {
        let prompt = Prompt::one_hop(EntityId(x), RelationId(r));
        let y = w.answer(&prompt).unwrap();
        rank_one_edit(p, &prompt, Some(y), EntityId((y.0 + 1) % 8), EditMode::ExactRedirect).unwrap()
    }

    fn rank_two(p: &ModelParams, w: &World) -> Adapter {
        let edits: Vec<Edit> = [(1, 0), (5, 2)]
            .iter()
            .map(|&(x, r)| {
                let prompt = Prompt::one_hop(EntityId(x), RelationId(r));
                let y = w.answer(&prompt).unwrap();
                Edit { prompt, old_target: Some(y), new_target: EntityId((y.0 + 3) % 8) }
            })
            .collect();
        multi_fact_edit(p, &edits, EditMode::ExactRedirect).unwrap()
    }

    #[test]
    fn single_adapter_is_preserved_by_every_strategy() {
        let (p, w) = setup(64, 1);
        let a = edit_on(&p, &w, 2, 1);
        let q = features(&p, &Prompt::one_hop(EntityId(2), RelationId(1))).unwrap().0;
        for c in [
            Combinator::Sum,
            Combinator::UniformMerge,
            Combinator::LinearMerge { weights: vec![1.0] },
            Combinator::Cat { weights: vec![1.0] },
            Combinator::arrow(),
        ] {
            let r = combine(&[&a], &c, Some(&q)).unwrap();
            assert_eq!(r.delta(), a.delta(), "{}", c.name());
        }
    }

    #[test]
    fn sum_with_negation_cancels() {
        let (p, w) = setup(64, 2);
        let a = edit_on(&p, &w, 3, 0);
        let r = combine(&[a.clone(), a.negated()], &Combinator::Sum, None).unwrap();
        assert!(r.delta().amax() < 1e-15);
    }

    #[test]
    fn sum_equals_cat_with_unit_weights_bitwise() {
        let (p, w) = setup(64, 3);
        let lib = [edit_on(&p, &w, 1, 0), rank_two(&p, &w), edit_on(&p, &w, 6, 2)];
        let s = combine(&lib, &Combinator::Sum, None).unwrap();
        let c = combine(&lib, &Combinator::Cat { weights: vec![1.0; 3] }, None).unwrap();
        assert_eq!(s.delta(), c.delta());
    }

    #[test]
    fn uniform_merge_expands_to_cross_terms() {
        let (p, w) = setup(64, 4);
        let (a, b) = (edit_on(&p, &w, 1, 0), edit_on(&p, &w, 4, 1));
        let r = combine(&[&a, &b], &Combinator::UniformMerge, None).unwrap();
        let cross = a.out_factor() * b.in_factor().transpose() + b.out_factor() * a.in_factor().transpose();
        let expect = (a.delta() + b.delta() + cross) * 0.25;
        assert!((r.delta() - expect).amax() < 1e-12);
    }

    #[test]
    fn linear_merge_matches_dense_double_sum_with_padding() {
        let (p, w) = setup(64, 5);
        let lib = [edit_on(&p, &w, 0, 0), rank_two(&p, &w)];
        let alpha = [0.7, -1.3];
        let r = combine(&lib, &Combinator::LinearMerge { weights: alpha.to_vec() }, None).unwrap();
        let mut expect = DMatrix::zeros(8, 64);
        for i in 0..2 {
            for j in 0..2 {
                let oi = linalg::pad_columns(lib[i].out_factor(), 2);
                let ij = linalg::pad_columns(lib[j].in_factor(), 2);
                expect += oi * ij.transpose() * (alpha[i] * alpha[j]);
            }
        }
        assert!((r.delta() - expect).amax() < 1e-10);
    }

    #[test]
    fn contract_errors() {
        let (p, w) = setup(64, 6);
        let a = edit_on(&p, &w, 0, 0);
        let empty: [&Adapter; 0] = [];
        assert!(combine(&empty, &Combinator::Sum, None).is_err());
        assert!(matches!(combine(&[&a], &Combinator::arrow(), None), Err(Error::Parameter(_))));
        assert!(combine(&[&a], &Combinator::Cat { weights: vec![1.0, 2.0] }, None).is_err());
        let (p2, w2) = setup(32, 6);
        let b = edit_on(&p2, &w2, 0, 0);
        assert!(matches!(combine(&[&a, &b], &Combinator::Sum, None), Err(Error::Shape(_))));
        let bad = Combinator::Arrow {
            temperature: 0.0,
            use_abs: true,
            activation: ArrowActivation::PostRelu,
            combine: ArrowCombine::Output,
        };
        assert!(bad.validate(1).is_err());
    }

    #[test]
    fn rank_one_prototype_is_normalized_feature_direction() {
        let (p, w) = setup(64, 7);
        let a = edit_on(&p, &w, 2, 2);
        let q = a.in_factor().column(0).into_owned();
        let proto = arrow_prototype(&a).unwrap();
        let expect = canonical_sign(&q / q.norm());
        assert!((proto - expect).amax() < 1e-12);
        let scaled = a.rescaled(-4.0);
        assert!((arrow_prototype(&scaled).unwrap() - arrow_prototype(&a).unwrap()).amax() < 1e-12);
    }

    #[test]
    fn rank_two_prototype_matches_dense_svd() {
        let (p, w) = setup(64, 8);
        let a = rank_two(&p, &w);
        let svd = a.delta().svd(false, true);
        let (top, _) = svd.singular_values.iter().enumerate().max_by(|x, y| x.1.total_cmp(y.1)).unwrap();
        let dense = canonical_sign(svd.v_t.unwrap().row(top).transpose());
        assert!((arrow_prototype(&a).unwrap() - dense).amax() < 1e-8);
    }

    #[test]
    fn zero_adapter_has_no_prototype() {
        let (p, w) = setup(64, 9);
        let prompt = Prompt::one_hop(EntityId(0), RelationId(0));
        let y = w.answer(&prompt).unwrap();
        let a = rank_one_edit(&p, &prompt, Some(y), y, EditMode::PaperStrict).unwrap();
        assert!(matches!(arrow_prototype(&a), Err(Error::DegenerateAdapter)));
    }

    #[test]
    fn orthogonal_query_routes_uniformly() {
        let (p, w) = setup(64, 10);
        let lib = [edit_on(&p, &w, 0, 0), edit_on(&p, &w, 3, 1), edit_on(&p, &w, 5, 2)];
        let protos: Vec<_> = lib.iter().map(|a| arrow_prototype(a).unwrap()).collect();
        // Gram-Schmidt a random vector against all prototypes.
        let mut q = DVector::from_fn(64, |i, _| ((i * 7919) % 13) as f64 - 6.0);
        let basis = DMatrix::from_columns(&protos);
        let qr = basis.qr();
        let qm = qr.q();
        q -= &qm * (qm.transpose() * &q);
        let r = arrow_route(&lib, &q, 1.0, true).unwrap();
        for wgt in r.weights {
            assert!((wgt - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn aligned_query_at_low_temperature_picks_its_adapter() {
        let (p, w) = setup(64, 11);
        let lib = [edit_on(&p, &w, 0, 0), edit_on(&p, &w, 3, 1)];
        let q = arrow_prototype(&lib[0]).unwrap() * 5.0;
        let r = arrow_route(&lib, &q, 1e-3, true).unwrap();
        assert!(r.weights[0] > 1.0 - 1e-9);
        let total: f64 = r.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn arrow_weights_ignore_factor_gauge() {
        let (p, w) = setup(64, 12);
        let lib = [edit_on(&p, &w, 0, 0), edit_on(&p, &w, 3, 1)];
        let regauged = [lib[0].rescaled(5.0), lib[1].rescaled(-0.2)];
        let q = features(&p, &Prompt::two_hop(EntityId(0), RelationId(0), RelationId(1))).unwrap().0;
        let a = arrow_route(&lib, &q, 1.0, true).unwrap();
        let b = arrow_route(&regauged, &q, 1.0, true).unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cat_weights_recover_exact_fits() {
        let (p, w) = setup(64, 13);
        let a = edit_on(&p, &w, 2, 0);
        let fit = fit_cat_weights(&p, &[&a], &a.targets()).unwrap();
        assert!((fit.weights[0] - 1.0).abs() < 1e-9);
        assert!(!fit.degenerate);
        let empty: [&Adapter; 0] = [];
        assert!(fit_cat_weights(&p, &empty, &a.targets()).is_err());
        assert!(fit_cat_weights(&p, &[&a], &[]).is_err());

        // two adapters, one probe each; reference solution from the 2×2 normal equations
        let b = edit_on(&p, &w, 6, 2);
        let probes: Vec<_> = a.targets().into_iter().chain(b.targets()).collect();
        let fit = fit_cat_weights(&p, &[&a, &b], &probes).unwrap();
        let (mut g, mut h) = ([[0.0; 2]; 2], [0.0; 2]);
        for (prompt, t) in &probes {
            let phi = features(&p, prompt).unwrap().0;
            let cols = [a.apply(&phi), b.apply(&phi)];
            let r = linalg::one_hot(8, t.0) - p.output() * &phi;
            for i in 0..2 {
                h[i] += cols[i].dot(&r);
                for j in 0..2 {
                    g[i][j] += cols[i].dot(&cols[j]);
                }
            }
        }
        let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
        let ref0 = (g[1][1] * h[0] - g[0][1] * h[1]) / det;
        let ref1 = (g[0][0] * h[1] - g[1][0] * h[0]) / det;
        assert!((fit.weights[0] - ref0).abs() < 1e-8 && (fit.weights[1] - ref1).abs() < 1e-8);
        assert!((fit.weights[0] - 1.0).abs() < 0.5 && (fit.weights[1] - 1.0).abs() < 0.5);
    }

    #[test]
    fn duplicated_adapter_gives_degenerate_cat_fit() {
        let (p, w) = setup(64, 14);
        let a = edit_on(&p, &w, 2, 0);
        let fit = fit_cat_weights(&p, &[&a, &a], &a.targets()).unwrap();
        assert!(fit.degenerate);
        assert!((fit.weights[0] - 0.5).abs() < 1e-8 && (fit.weights[1] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn routed_outputs_stay_in_the_span_of_output_changes() {
        let (p, w) = setup(64, 15);
        let lib = [edit_on(&p, &w, 0, 0), edit_on(&p, &w, 3, 1)];
        let prompt = Prompt::two_hop(EntityId(0), RelationId(0), RelationId(1));
        let q = features(&p, &prompt).unwrap().0;
        let basis = DMatrix::from_columns(&[lib[0].out_factor().column(0).into_owned(), lib[1].out_factor().column(0).into_owned()]);
        let proj = &basis * (basis.transpose() * &basis).try_inverse().unwrap() * basis.transpose();
        for c in [Combinator::Sum, Combinator::UniformMerge, Combinator::Cat { weights: vec![0.3, 2.0] }, Combinator::arrow()] {
            let r = combine(&lib, &c, Some(&q)).unwrap();
            let out = forward(&p, &prompt, Some(&r)).unwrap().0 - forward(&p, &prompt, None).unwrap().0;
            assert!((&out - &proj * &out).amax() < 1e-10, "{}", c.name());
        }
    }

    #[test]
    fn combinator_config_syntax() {
        let c: Combinator = serde_json::from_str(r#"{"strategy": "arrow", "temperature": 1.0, "use_abs": true}"#).unwrap();
        assert_eq!(c, Combinator::arrow());
        let c: Combinator = serde_json::from_str(r#"{"strategy": "uniform"}"#).unwrap();
        assert_eq!(c, Combinator::UniformMerge);
    }
}
