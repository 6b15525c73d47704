//! Measurement toolkit for extortion spam paid in bitcoin.
//!
//! The pipeline groups a spam corpus into template buckets, pulls payment
//! addresses and ransom amounts out of each email, expands the addresses
//! over a ledger export with the multiple-input heuristic, filters the
//! incoming payments and reports revenue, holding periods and onward flows.

pub mod base58;
pub mod corpus;
pub mod unionfind;
pub mod chainstore;
pub mod clustering;
pub mod filters;
pub mod linkage;
pub mod plot;
pub mod flows;
pub mod stats;
pub mod config;
pub mod fixture;
pub mod pipeline;
