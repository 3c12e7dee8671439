//! Reverse-mode differentiation substrate.
//!
//! Provides dense [`Tensor`]s, a named [`ParamStore`], a recording [`Graph`]
//! with exactly the primitives the models need, and a finite-difference
//! [`grad_check`] harness. Everything is double precision with a fixed
//! reduction order, so results are bit-deterministic.

mod check;
mod graph;
mod tensor;

pub use check::{grad_check, GradCheckEntry, GradCheckReport, FD_STEP};
pub use graph::{
    BnState, Graph, Init, LrGroup, Mode, NodeId, ParamId, ParamStore, BN_EPS, BN_MOMENTUM,
};
pub use tensor::Tensor;
