//! A temporal-difference learning lab built around return-based error
//! scaling: sigma^2 = V[R] + V[gamma] E[G^2], its floors, competitor
//! normalisation schemes, synthetic environments that exercise the known
//! failure modes, and the brute-force oracles that validate all of it.

pub mod env;
pub mod error;
pub mod harness;
pub mod learner;
pub mod oracle;
pub mod scaling;
pub mod stats;
pub mod values;

pub use error::{Result, TdScaleError};
