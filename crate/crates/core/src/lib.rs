//! Controllable multi-agent driving simulation: a conditional variational
//! recurrent policy over birdview rasters, its training loop, a
//! kinematic-bicycle simulator, evaluation metrics and a session service.

pub mod error;
pub mod kinematics;
pub mod obb;
pub mod scene;
pub mod raster;
pub mod conditioning;
pub mod nn;
pub mod policy;
pub mod checkpoint;
pub mod simulation;
pub mod data;
pub mod training;
pub mod metrics;
pub mod evaluation;
pub mod service;

pub use checkpoint::Checkpoint;
pub use conditioning::{AgentConditions, ReachParams, TargetSpeed, Waypoint};
pub use error::{Error, Result};
pub use policy::{Architecture, Policy};
pub use scene::{Action, AgentGeometry, AgentState, MapMesh, TrajectorySegment};
