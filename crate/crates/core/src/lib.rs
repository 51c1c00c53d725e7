//! Physics-informed neural reconstruction of droplet-collision dynamics
//! from a few X-ray projection views.

pub mod config;
pub mod container;
pub mod discriminator;
pub mod domain;
pub mod error;
pub mod fluidsim;
pub mod metrics;
pub mod neuralfield;
pub mod pinn;
pub mod trainer;
pub mod xray;

pub use config::{validate_config, ReferenceScales, RunConfig, Seeds, SimulationConfig, TrainingConfig};
pub use domain::{DomainSpec, FlowState, MaterialPair, RefractiveIndex, ScalarField3};
pub use error::{Error, Result};
