#![allow(dead_code)]

pub use timegnn::Tensor;

pub mod oracles;
