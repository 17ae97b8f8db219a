pub mod backbone;
pub mod checkpoint;
pub mod contour;
pub mod data;
pub mod error;
pub mod explain;
pub mod model;
pub mod params;
pub mod swin;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{HybridModel, HybridModelConfig, Prediction};
pub use tensor::{Tape, Tensor, Var};
