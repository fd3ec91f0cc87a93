pub mod engine;
pub mod magnetics;
pub mod memory;
pub mod network;
pub mod node;
