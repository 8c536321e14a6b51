pub mod ablate;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub(crate) mod kernels;
pub mod metrics;
pub mod objective;
pub mod optim;
pub mod par;
pub mod params;
pub mod predict;
pub mod segnet;
pub mod tensor;
pub mod text;
pub mod text_kernels;
pub mod train;

pub use autodiff::{Activation, BatchNormState, BatchStats, Gradients, Tape, Var};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::{Error, Result};
pub use kernels::ConvGeometry;
pub use params::{Bindings, ModelParams, Param, ParamGrads};
pub use segnet::{ForwardOutput, NetConfig, SegNet};
pub use tensor::Tensor;
