pub mod checkpoint;
pub mod error;
pub mod esm;
pub mod gradsuite;
pub mod metrics;
pub mod numerics;
pub mod optim;
pub mod pcem;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod segnet;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Graph, Scalar, Tensor, Var};
pub use phantom::{DatasetManifest, Mask, PhantomConfig, Sample, Split};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
