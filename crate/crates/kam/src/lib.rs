//! Numerical engine for multi-scale KAM iteration.
//!
//! The core is generic over the scalar type (`f32`/`f64`); the aliases below
//! fix it to `f64`, which is what the command line tool uses.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod scalar;
pub mod cli;
pub mod conditions;
pub mod kamstep;
pub mod measure;
pub mod model;
pub mod schedule;
pub mod series;

pub use scalar::Real;

pub type Series = series::FourierTaylorSeries<f64>;
pub type Window = series::DomainWindow<f64>;
pub type Scales = model::ScaleSet<f64>;
pub type NormalForm = model::NormalForm<f64>;
pub type HamiltonianSpec = model::HamiltonianSpec<f64>;
