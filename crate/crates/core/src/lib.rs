//! Simulation of the indirect-signalling chemotaxis system
//!
//! ```text
//!   ∂t n = Δn - ∇·(n∇c)
//! ε ∂t c = Δc - c + w
//! ε ∂t w = τΔw - w + n
//! ```
//!
//! with Neumann boundaries, together with its parabolic-elliptic limit
//! (`ε → 0`) and its Keller-Segel limit (`(ε, τ) → 0`), plus the diagnostics
//! and sweep harness used to measure how fast the relaxed solutions approach
//! the limits.
//!
//! The numerical kernels are generic over the scalar type (see [`Real`]); the
//! sweep harness in [`experiments`] works in `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod grid;
pub mod initial;
pub mod operators;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Grid64 = grid::Grid<f64>;
pub type Field64 = grid::Field<f64>;
pub type State64 = dynamics::State<f64>;
pub type Grid32 = grid::Grid<f32>;
pub type Field32 = grid::Field<f32>;
pub type State32 = dynamics::State<f32>;
