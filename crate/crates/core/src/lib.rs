pub mod data;
pub mod error;
pub mod gvlm;
pub mod harness;
pub mod lm;
pub mod modality;
pub mod nn;
pub mod numerics;
pub mod prompt;
pub mod router;

pub use error::{MarioError, Result};
pub use modality::Modality;
