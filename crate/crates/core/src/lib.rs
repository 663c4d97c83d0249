//! Step-gated decision sessions in which a person decides first and a model
//! only suggests: rule-path and mask-importance explanations, similar past
//! cases, and a delayed confidence reveal. User decisions feed a rehearsal
//! training set guarded by a holdout accuracy floor, and every event lands in
//! a hash-chained log that can be verified and replayed.

pub mod artifacts;
pub mod audit;
pub mod config;
pub mod dataset;
pub mod digest;
pub mod encode;
pub mod engine;
pub mod events;
pub mod explain;
pub mod finetune;
pub mod par;
pub mod predictor;
pub mod replay;
pub mod schema;
pub mod session;
pub mod similarity;
pub mod suggest;
pub mod synth;
pub mod tree;
