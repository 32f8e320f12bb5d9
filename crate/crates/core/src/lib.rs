#![cfg_attr(not(feature = "std"), no_std)]
extern crate alloc;
pub mod error;
pub mod graph;
pub mod scalar;
pub mod scene;
pub mod tokenizer;
pub mod verbalise;
pub mod patchmask;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod synth;
pub mod trainer;
pub mod eval;
