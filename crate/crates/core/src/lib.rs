//! Spatial relation graph for mixed-reality sessions.
//!
//! The crate is sans-IO: an [`engine::Engine`] consumes interaction events
//! and reasoner outcomes and yields graph deltas plus outbound reasoner
//! requests. Transport, files and clocks belong to the caller.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod context;
pub mod engine;
pub mod geometry;
pub mod graph;
pub mod ids;
pub mod inference;
pub mod interaction;
pub mod mock;
pub mod registry;
pub mod schema;
pub mod state;

pub use engine::{Engine, EngineConfig, EventError, Notice, Step};
pub use ids::{EdgeId, ItemRef, NodeId, ProposalId, RequestId};
pub use inference::{Reasoner, ReasonerOutcome, ReasonerRequest};
pub use state::{Delta, SessionState};
