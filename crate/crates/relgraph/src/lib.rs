//! Host side of the relation graph engine: scenario replay with golden
//! timelines, asynchronous reasoner drivers and the live session service.

pub mod canonical;
pub mod config;
pub mod driver;
pub mod prompts;
pub mod protocol;
pub mod replay;
pub mod scenario;
pub mod service;
