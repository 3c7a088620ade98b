pub mod aligner;
pub mod backbone;
pub mod codec;
pub mod durbits;
pub mod error;
pub mod flowhead;
pub mod harness;
pub mod masks;
pub mod nn;
pub mod numerics;
pub mod pipeline;

pub use error::{Error, Result};
