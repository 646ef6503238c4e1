//! Knowledge-enhanced prompt learning for few-shot fake news detection
//! under domain shift.

pub mod autograd;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod extraction;
pub mod knowledge;
pub mod model;
pub mod par;
pub mod prompt;
pub mod training;
pub mod variant;

pub use error::{CoolError, Result};
