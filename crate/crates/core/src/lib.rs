pub mod data_model;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod inference;
pub mod io;
pub mod losses;
pub mod network;
pub mod optim;
pub mod ot_prior;
pub mod pipeline;
pub mod pseudo_labels;
pub mod training;
pub mod viz;

pub use error::{Error, Result};
