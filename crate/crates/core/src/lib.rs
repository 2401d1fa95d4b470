pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod discriminator;
pub mod generator;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod speaker;
pub mod tensor;
pub mod trainer;

/// Mel channels per frame.
pub const N_MELS: usize = 80;
