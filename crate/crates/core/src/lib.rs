//! Serverless peer-to-peer mail over onion services.
//!
//! The crate is a deterministic protocol engine: participants ([`node`]) hold
//! self-certifying identities ([`identity`]), address books with introduction
//! provenance ([`addressbook`]) and retry queues, exchange canonical envelopes
//! ([`wire`]) over a simulated onion transport ([`simnet`]), and run
//! decentralised mailing lists with optional hash-chain ledgers ([`gossip`]).
//! [`world`] wires nodes to the simulator and [`scenario`] drives it from
//! line-oriented scripts.

pub mod addressbook;
pub mod batch;
pub mod gossip;
pub mod identity;
pub mod node;
pub mod scenario;
pub mod simnet;
pub mod wire;
pub mod world;

/// Simulation time in abstract integer units.
pub type SimTime = u64;
