//! Minimal reverse-mode autodiff over dense tensors, sized for the 3D
//! conv nets in this crate. Generic over f32 (training) and f64
//! (finite-difference gradient verification).

pub mod conv;
pub mod graph;
pub mod params;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;

/// Scalar element type the engine runs in.
pub trait Element:
    LinalgScalar + Float + ScalarOperand + std::fmt::Debug + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn from_f32(v: f32) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f64(self) -> f64 {
        self
    }
}

pub use graph::{Graph, NodeId};
pub use params::{Param, ParamStore};
