#![no_std]
extern crate alloc;

pub mod analysis;
pub mod cv;
pub mod error;
pub mod heads;
pub mod masking;
pub mod metrics;
pub mod modality;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod volume;
