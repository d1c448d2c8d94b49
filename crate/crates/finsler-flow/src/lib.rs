//! Numerical engine for Finslerian Ricci flow on the two-torus.
//!
//! The crate is organized in two layers that deliberately mirror each other:
//!
//! * an **analytic layer** ([`analytic`], [`finsler`], [`curvature`]) where
//!   Finsler structures are closed-form expressions and every tensor is
//!   obtained by exact automatic differentiation at a single point, and
//! * a **grid layer** ([`grid`], [`flow`], [`pullback`]) where the same
//!   quantities live on a discretized sphere bundle over the torus and are
//!   assembled with finite-difference / spectral stencils.
//!
//! The analytic layer has no discretization error, so it doubles as the
//! reference implementation against which the grid pipeline is validated.
//! Independent closed-form oracles for special metric families live in
//! [`oracle`]; scenario configuration, named verification checks and report
//! generation live in [`scenario`].

pub mod analytic;
pub mod curvature;
pub mod dual;
pub mod error;
pub mod finsler;
pub mod flow;
pub mod grid;
pub mod oracle;
pub mod pullback;
pub mod scenario;

pub use error::{FinslerError, Result};
