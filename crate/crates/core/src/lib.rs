pub mod error;
pub mod cli;
pub mod config;
pub mod evaluation;
pub mod classifier;
pub mod contact;
pub mod controller;
pub mod dataset;
pub mod dynamics;
pub mod kinematics;
pub mod observer;
pub mod reaction;
pub mod simulation;

pub use error::{Error, Result};
