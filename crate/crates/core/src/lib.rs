pub mod atomic;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod kv;
pub mod lca;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pe;
pub mod sao;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, OpCounter, OpKind, Precision, Tape, Tensor, Var};
