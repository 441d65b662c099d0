//! Transparent event-based recommendation engine.
//!
//! Events are folded into binary per-kind interaction matrices, correlated
//! cross-occurrence indicators are learned with a log-likelihood ratio test,
//! and frames are assembled by blending those scores with content similarity
//! and popularity before business rules are applied. Every served frame
//! carries a disclosure of its ranking criteria, the data it read and the
//! rule effects. The [`audit`] module runs a seeded benchmark over the whole
//! pipeline (or any other frame server) and reports fairness and safety checks.

pub mod audit;
pub mod cco;
pub mod events;
pub mod http;
pub mod hybrid;
pub mod rules;
pub mod service;
pub mod time;
pub mod transparency;

pub use time::Timestamp;
