pub mod adapters;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod decoding;
pub mod discbase;
pub mod judges;
pub mod optim;
pub mod error;
pub mod evalsuite;
pub mod params;
pub mod seq2seq;
pub mod tensor;
pub mod textpipe;
pub mod trainer;

pub use error::{Error, Result};
