//! Numerical laboratory for the high-frequency limit of dissipative
//! Helmholtz problems.
//!
//! The crate computes the limiting phase-space measure of the outgoing
//! solution of `(-h^2 Δ + V1 - i h V2 - E_h) u = S_h` in two independent
//! ways: by integrating weighted Hamiltonian rays that leave the source
//! manifold ([`measure`]), and by solving the equation on a grid
//! ([`helmholtz`]) and pairing the Wigner transform of the solution with
//! test observables ([`wigner`]). The [`wkb`] module provides eikonal
//! phases, transport amplitudes and a split-step reference propagator.

pub mod banded;
pub mod error;
pub mod helmholtz;
pub mod measure;
pub mod ode;
pub mod par;
pub mod potential_flow;
pub mod quad;
pub mod source;
pub mod stats;
pub mod wigner;
pub mod wkb;

pub use error::{Error, Result};
