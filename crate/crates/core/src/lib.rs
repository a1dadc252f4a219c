pub mod ad;
pub mod augment;
pub mod container;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod expert;
pub mod nets;
pub mod scores;
pub mod select;
pub mod table;
pub mod tensor;
pub mod train;
pub mod util;

pub use error::{Error, Result};
pub use tensor::Tensor;
