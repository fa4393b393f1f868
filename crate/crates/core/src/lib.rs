//! Simulation library for an open market where LLM agents post, bid on,
//! execute and pay for cognitive tasks.
//!
//! The crate is organised around one round engine ([`market::Market`]),
//! the agent decision interface ([`policy::AgentPolicy`]) with built-in
//! and external implementations, a stochastic execution layer, and the
//! analytics used to summarise transaction logs. See `examples/` for a
//! runnable tour of each piece.

pub mod analytics;
pub mod api;
pub mod economy;
pub mod execution;
pub mod experiment;
pub mod market;
pub mod policy;
pub mod rng;

pub use economy::{AgentId, AgentState, MarketConfig, TaskSpec};
pub use market::{Market, MarketState, Mode};
pub use policy::AgentPolicy;
