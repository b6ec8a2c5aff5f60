//! Geographic group-specific recommendation policies trained with EM and REINFORCE.
//!
//! A shared DIN tower turns a user state into an action embedding, and a
//! group-specification head reshapes it according to the user's geographic
//! group. Three heads are provided: hard routing to k-means towers,
//! prototype-generated weights, and a linear hypernetwork on the geo
//! embedding. A synthetic environment with planted groups, ranking metrics,
//! and a gradient checker support verification.

pub mod config;
pub mod error;
pub mod eval;
pub mod geo;
pub mod grouping;
pub mod numerics;
pub mod policy;
pub mod simulator;
pub mod training;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use geo::{GeoContext, State};
pub use numerics::{ParamStore, Tensor};
pub use policy::{GroupIndicator, GsVariant, Model, ModelConfig, Vocab};
pub use simulator::{Environment, EnvironmentSpec, Episode, Step};
pub use training::{TrainConfig, TrainHistory};
