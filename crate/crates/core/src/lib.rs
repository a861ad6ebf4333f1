// Negated comparisons reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod masked;
pub mod params;
pub mod probe;
pub mod prototypes;
pub mod scalar;
pub mod training;
pub mod volume;

pub use error::{Error, Result};

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type ModelState64 = training::ModelState<f64>;
pub type ModelState32 = training::ModelState<f32>;
pub type Corpus64 = training::corpus::Corpus<f64>;
pub type Corpus32 = training::corpus::Corpus<f32>;
pub type Prototypes64 = prototypes::Prototypes<f64>;
pub type Prototypes32 = prototypes::Prototypes<f32>;
