pub mod data;
pub mod downstream;
pub mod fusion;
pub mod hd_mask;
pub mod loss;
pub mod model;
pub mod nn;
pub mod persist;
pub mod predictor;
pub mod scalar;
pub mod taxonomy;
pub mod tensor;
pub mod text;
pub mod train;
pub mod vision;

pub use scalar::Scalar;

pub type Dart64 = model::Dart<f64>;
pub type Dart32 = model::Dart<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type ParamStore64 = tensor::ParamStore<f64>;
pub type Trainer64 = train::Trainer<f64>;
