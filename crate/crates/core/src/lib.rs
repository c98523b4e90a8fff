//! Onsager-Machlup action functionals, most probable paths and tube
//! probabilities for degenerate McKean-Vlasov systems.

pub mod dsl;
pub mod error;
pub mod linalg;
pub mod measure;
pub mod mpp;
pub mod om;
pub mod optim;
pub mod path;
pub mod simulate;
pub mod system;
pub mod tube;

pub use error::{Error, Result};
