//! Thin tube-on-plate multi-structures in nonlinear elasticity.
//!
//! A vertical tube of cross-section `r ωᵃ` and height `L` stands on a plate
//! of cross-section `ωᵇ` and thickness `h`. The crate solves the rescaled
//! three-dimensional problems on the fixed domains `Ωᵃ = ωᵃ×(0,L)` and
//! `Ωᵇ = ωᵇ×(−1,0)`, the reduced string/membrane limits in the three regimes
//! `h/r² → ℓ ∈ (0,∞)`, `→ ∞`, `→ 0`, and the envelope computations these
//! limits need.

pub mod cli;
pub mod envelopes;
pub mod error;
pub mod forces;
pub mod material;
pub mod mesh;
pub mod optim;
pub mod solvers;
pub mod tensor;

pub use error::{Error, Result};
