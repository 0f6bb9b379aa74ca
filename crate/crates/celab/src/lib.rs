pub mod channel;
pub mod container;
pub mod rng;
pub mod spectral;
pub mod vae;
