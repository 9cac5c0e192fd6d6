pub mod convnet;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dropout;
pub mod error;
pub mod export;
pub mod layers;
pub mod network;
pub mod optimizer;
pub mod oracle;
pub mod rng;
pub mod tensor;
pub mod trainer;
