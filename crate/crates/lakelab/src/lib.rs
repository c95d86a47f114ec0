//! Optimal control of the shallow lake problem: the deterministic Pontryagin
//! candidate, a monotone viscosity solver for the stochastic HJB equation, and
//! metastable exit times of the optimally controlled lake.

pub mod cache;
pub mod error;
pub mod hjb;
pub mod metastability;
pub mod model;
pub mod numerics;
pub mod ode;
pub mod pontryagin;

pub use error::{LakeError, Result};
pub use model::{hill_curve, hill_curve_with_exponent, LakeParams, PhasePoint, RecyclingCurve};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/deterministic.md")]
    mod deterministic {}
    #[doc = include_str!("../../../book/src/stochastic.md")]
    mod stochastic {}
    #[doc = include_str!("../../../book/src/metastability.md")]
    mod metastability {}
}
