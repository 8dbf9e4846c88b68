//! Cooperative multi-agent Q-learning with a learned, dynamic, directed
//! communication graph and a graph-coarsening value mixer.

pub mod config;
pub mod env;
pub mod gate;
pub mod gradcheck;
pub mod mixer;
pub mod model;
pub mod nn;
pub mod qnet;
pub mod tensor;
pub mod train;
