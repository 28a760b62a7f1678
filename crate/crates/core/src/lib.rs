//! Decoupled spatial/temporal networks with recoupling attention for RGB-D
//! motion recognition, built on a small reverse-mode autodiff engine.

pub mod checkpoint;
pub mod clip;
pub mod dsn;
pub mod dtn;
pub mod frp;
pub mod fusion;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod layers;
pub mod model;
pub mod optim;
pub mod params;
pub mod rcm;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::{Real, Tensor};
