//! Numerical toolkit for linear diffusions killed at the boundary of a
//! half-space: the Dirichlet semigroup computed by an image kernel, mild
//! solutions of semilinear backward equations by Picard iteration in weighted
//! norms, and an exit-time optimal control layer with statistical
//! verification against killed-path Monte Carlo.

#![forbid(unsafe_code)]

pub mod control;
pub mod func;
pub mod grid;
pub mod growth;
pub mod hjb;
pub mod mc;
pub mod model;
pub mod mollify;
pub mod quad;
pub mod semigroup;
pub mod stats;
