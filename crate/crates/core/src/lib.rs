//! Multi-target domain adaptation with a dual classifier head (MLP and
//! graph), co-teaching pseudo-labels and an easy-to-hard domain curriculum.

pub mod autograd;
pub mod config;
pub mod curriculum;
pub mod data;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;

pub use error::{Error, Result};
