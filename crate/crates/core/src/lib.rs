#![no_std]
extern crate alloc;

pub mod ama;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod moments;
pub mod nets;
pub mod optim;
pub mod pyramid;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::{Element, Tensor};
