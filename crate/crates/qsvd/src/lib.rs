pub mod compressed;
pub mod config;
pub mod cost;
pub mod engine;
pub mod error;
pub mod factorize;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod quant;
pub mod rank;
pub mod store;
