//! Causal algorithmic recourse under feature uncertainty.
//!
//! This crate models recourse recommendations as interventions on a
//! structural causal model and asks whether a recommended action keeps its
//! promise when the individual's features are slightly uncertain. It
//! provides:
//!
//! - [`autodiff`]: a small reverse-mode tape used by the trainers, solvers
//!   and attacks;
//! - [`scm`]: additive-noise structural causal models with abduction, hard
//!   and additive interventions, and interventional Jacobians;
//! - [`model`]: linear and MLP classifiers with threshold selection and
//!   recourse-aware training objectives;
//! - [`recourse`]: standard and robust recourse generation (closed form for
//!   the linear case, projected-gradient min-max otherwise);
//! - [`attack`]: minimal-invalidation search measuring how fragile a
//!   recourse action actually is;
//! - [`data`]: CSV ingestion, standardization, and synthetic populations
//!   sampled from an SCM.
//!
//! All numerics are generic over [`num::Real`] (`f32` or `f64`); the
//! aliases below pin the common `f64` instantiations.

pub mod attack;
pub mod autodiff;
pub mod data;
pub mod model;
pub mod num;
pub mod recourse;
pub mod scm;

pub use num::Real;

/// `f64` reverse-mode tape.
pub type Tape64 = autodiff::Tape<f64>;
/// `f64` structural causal model.
pub type Scm64 = scm::Scm<f64>;
/// `f64` classifier.
pub type Classifier64 = model::Classifier<f64>;
/// `f64` recourse action.
pub type RecourseAction64 = recourse::RecourseAction<f64>;
/// `f64` dataset.
pub type Dataset64 = data::Dataset<f64>;
/// `f64` attack result.
pub type AttackResult64 = attack::AttackResult<f64>;
