//! Differentiation engine for training.
//!
//! Gradient-dependent losses need nested derivatives: the loss contains the
//! exact input gradient of the network, and training differentiates that
//! gradient with respect to the parameters. The scheme here is
//! reverse-over-forward: forward-mode tangents carry the input gradient
//! through every primitive, the tangent computation itself is recorded on the
//! tape, and one reverse sweep yields the parameter gradient of any recorded
//! scalar, including terms built from tangents.
//!
//! Everything runs in double precision; nested derivatives amplify rounding.

mod dual;
mod ops;
mod params;
mod tape;

pub use dual::DualBatch;
pub use ops::{activation_forward, add_forward, dense_forward, encode_forward, Activation};
pub use params::{adam_step, AdamState, ParamId, ParamSpec, ParamStore, ParamStoreBuilder};
pub use tape::{Endpoint, HeadOut, LossInputs, LossTerms, Tape, Var};

/// Guard for `1 / ||grad T||` and action normalization.
pub const GRAD_GUARD: f64 = 1e-8;
