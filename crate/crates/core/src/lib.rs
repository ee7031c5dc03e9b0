pub mod certificate;
pub mod diagnostics;
pub mod error;
pub mod gridconv;
pub mod kernel;
pub mod analysis;
pub mod oracle;
mod pairs;
pub mod sampling;
pub mod score;
pub mod sum;
pub mod transport;
pub mod types;

pub use error::{Error, Result};
pub use sum::Reduction;
