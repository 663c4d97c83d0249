//! HTTP service and admin CLI around the decision-support engine.

pub mod api;
pub mod cli;
