//! Deterministic core of a two-stage service orchestration model: a consumer
//! request is first identified with the help of domain experts, then
//! developed into a workflow of atomic tasks that are provisioned through
//! negotiation or reverse auction and executed under monitoring.
//!
//! Everything here is `no_std` + `alloc` and free of IO. Randomness comes
//! from [`rng::DetRng`] streams addressed by seed and labels, and every
//! price, weight and confidence is an exact [`rational::Rational`].

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod identification;
pub mod ids;
pub mod messaging;
pub mod ontology;
pub mod planner;
pub mod provisioning;
pub mod rational;
pub mod registrar;
pub mod rng;

pub use ids::{
    AgentId, Capability, ContractId, ConversationId, EnvironmentId, RequestId, Tag, TaskId, Tick,
};
pub use rational::Rational;
