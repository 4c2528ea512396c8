//! Joint estimation of states, attack vectors and hidden modes for switched
//! nonlinear stochastic systems under sensor and actuator attacks.

pub mod bank;
pub mod decomposition;
pub mod error;
pub mod model;
pub mod nise;
pub mod numerics;
pub mod ode;
pub mod plant;
pub mod reduction;
pub mod scenario;

pub use error::{Error, Result};
pub use model::{AttackLocationSet, LinearSystem, ModeLabel, ModeModel, SystemModel};
pub use numerics::{Matrix, Vector};
