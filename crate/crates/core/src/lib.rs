//! Equity-aware register attention.
//!
//! Causal attention whose rows carry an amplitude `α_i` and a register decay
//! slope `σ_i`. Future slots receive logits `-(j - i) σ_i` instead of being
//! masked to `-∞`; the mass they absorb is discarded after the softmax. Rows
//! aligned with dominant objects are damped, rows aligned with rare but
//! confident objects are sharpened and decay slower.
//!
//! Modules:
//! - [`numerics`]: matrices, stable softmax, min-max normalization, EMA Gaussian
//! - [`attention`]: causal mask, register, attention composition
//! - [`equity`]: dominance penalty, outlier boost, row modulation
//! - [`decoder`]: toy frozen-weight decoder and greedy decode loop
//! - [`scenesim`]: synthetic long-tail scenes and coverage metrics
//! - [`experiment`]: seeded experiment runs, sweeps and report files

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod decoder;
pub mod equity;
pub mod error;
pub mod experiment;
pub mod numerics;
pub mod scenesim;

pub use attention::{build_causal_mask, build_register, compose_attention, AttentionInputs, AttentionResult};
pub use decoder::{
    autoregressive_decode, autoregressive_decode_with, decoder_layer_forward, decoder_layer_forward_with,
    AttentionKernel, DecodeOutput, DecodeTrace, ObjectSource, RegisterKernel, StepRecord, ToyModel, ToyModelConfig,
};
pub use equity::{EquityContext, EquityParams, ObjectStats, RowModulation, RowObjectMap};
pub use error::{Error, Result};
pub use numerics::{mahalanobis_diag, minmax_normalize, stable_softmax_row, EmaGaussian, Matrix};
pub use scenesim::{coverage_metrics, emit_objects, generate_scene, gini, CoverageReport, Scene, SceneConfig};
