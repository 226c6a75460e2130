pub mod autograd;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod frontend;
pub mod gradcheck;
pub mod init;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod segment;
pub mod simulate;
pub mod sot;
pub mod speaker;
pub mod train;

pub use error::{Error, Result};
