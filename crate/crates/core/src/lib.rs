pub mod annotation;
pub mod autodiff;
pub mod bank;
pub mod config;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod events;
pub mod fusion;
pub mod gradcheck;
pub mod index;
pub mod io;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod synth;
pub mod text;
pub mod training;

pub use error::{Error, Result};
