//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The engine is a Wengert tape: forward calls record operations into an
//! append-only arena, `backward` replays them in reverse. Tensors are arena
//! slots addressed by [`TensorId`]; parameters live outside the tape in a
//! [`ParameterStore`] and are registered onto a fresh tape for every step.
//!
//! Double precision is the default throughout the crate and is required for
//! finite-difference gradient checks; the engine itself is generic over
//! [`Scalar`] so single precision is available where speed matters more than
//! checkable gradients.

mod gradcheck;
mod kernels;
mod params;
mod recurrent;
mod tape;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use params::{BoundParams, GradMap, Init, ParamSpec, ParameterStore};
pub use recurrent::{recurrent_cell, recurrent_param_specs, RecurrentKind, RecurrentParams};
pub use tape::{Tape, TensorId};

use std::fmt::Debug;

/// Element type of tensor storage: `f64` (default precision) or `f32` (opt-in).
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("constant representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Epsilon inside the layer-norm variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Negative slope of leaky ReLU (both the activation knob and R-GAT attention).
pub const LEAKY_RELU_SLOPE: f64 = 0.2;
