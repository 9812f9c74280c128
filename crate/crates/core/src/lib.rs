pub mod binauralizer;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod frontend;
pub mod graph_attention;
pub mod model;
pub mod nn;
pub mod persist;
pub mod seeding;
pub mod spectrogram;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use ndarray;
