pub mod error;
mod gemm;
pub mod layer;
pub mod tensor;
pub mod transforms;

pub use error::{Error, Result};
pub use layer::{
    LayerGrads, MacCount, StageTimes, TemplateConvConfig, TemplateConvLayer, TemplateFeatures,
};
pub use tensor::{ConvGeometry, Tensor4};
pub use transforms::{KernelShape, SpatialTransform, TransformFamily};

pub mod bench;
pub mod cost;
pub mod equiv;
pub mod io;
pub mod nn;
pub mod pruning;
pub mod viz;
