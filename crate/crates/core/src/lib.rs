//! Domain model, transactional store, configuration and ARK identifiers
//! shared by every component of the heritage reconstruction platform.

pub mod ark;
pub mod clock;
pub mod config;
pub mod domain;
pub mod error;
pub mod scalar;
pub mod store;

pub use ark::{ArkError, ArkName};
pub use clock::{Clock, ManualClock, SharedClock, SystemClock};
pub use config::Config;
pub use domain::*;
pub use error::{Error, Result};
pub use scalar::Real;
pub use store::{ArkEntry, Resolution, Store, Tx};

/// Default working precision for geometry and metrics.
pub type Scalar = f32;
/// Double precision for reference computations.
pub type Scalar64 = f64;
