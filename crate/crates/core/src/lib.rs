pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod params;
pub mod rng;
pub mod ssim;
pub mod tensor;
pub mod trainer;

pub use config::Config;
pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::{Real, Tape, Tensor, Var};
