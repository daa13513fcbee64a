//! A compact reverse-mode automatic differentiation engine for training
//! small convolutional networks on the CPU in double precision.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;

pub use graph::{Gradients, Graph, Tensor, Var};
pub use layers::{Conv2d, ConvTranspose2d, Linear};
pub use ops::conv::{conv_out_size, conv_transpose_out_size};
pub use ops::spatial::{bilinear_taps, resize_bilinear_array};
pub use ops::{sigmoid, Reduction};
pub use optim::{clip_grad_norm, Adam, Optimizer, RmsProp};
pub use params::{Param, ParamStore};
