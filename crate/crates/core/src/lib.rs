//! A desk-scale laboratory for low-rank adapter (LoRA) edits on a one-layer
//! random-features transformer.
//!
//! The model has frozen random token embeddings `E`, a frozen attention value
//! map `V` with exactly uniform attention, a frozen ReLU random-features layer
//! `U`, and a trainable linear readout `W`. On top of it the crate provides:
//!
//! - [`world`]: synthetic entity/relation universes and adapter-library layouts,
//! - [`model`]: the forward pass and ridge fitting of the readout,
//! - [`lora`]: closed-form minimum-penalty rank-one and multi-fact edits,
//! - [`routing`]: sum, uniform/linear merge, CAT, and Arrow combination,
//! - [`kernel`]: the arc-cosine kernel limit and mixture diagnostics,
//! - [`experiments`]: seeded pipelines with CSV/JSON/markdown reports.
//!
//! Matrix orientation: every adapter stores `ΔW = out_factor · in_factorᵀ`
//! with `out_factor ∈ ℝ^{entities×s}` and `in_factor ∈ ℝ^{m×s}`.

// `!(x > 0.0)` is how NaN gets rejected alongside the bound.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiments;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod lora;
pub mod model;
pub mod rng;
pub mod routing;
pub mod world;

pub use error::{Error, Result};
pub use kernel::{arccos_kernel, kernel_ratio, mc_kernel_ratio, mixture_decompose, predict_two_hop};
pub use kernel::{KernelPrediction, Mixture};
pub use lora::{multi_fact_edit, penalty, rank_one_edit, Adapter, Edit, EditMode};
pub use model::{
    features, fit_w, forward, init_params, mix, recall_accuracy, FeatureVec, ModelDims,
    ModelParams, OutputVec, RecallReport, WeightDelta,
};
pub use routing::{
    arrow_prototype, arrow_prototypes, arrow_route, combine, combine_routed, fit_cat_weights, Combinator, RoutedDelta,
};
pub use world::{
    compose, gen_edits, gen_graph_config, gen_world, EntityId, FactEdit, GraphConfig, GraphMode,
    Prompt, RelationId, World,
};

pub use nalgebra::{DMatrix, DVector};
