#[cfg(feature = "cli")]
pub mod cli;
pub mod comm;
pub mod config;
pub mod model;
pub mod ocp;
pub mod sim;
pub mod solver;
pub mod spacing;
pub mod stability;
pub mod topology;
