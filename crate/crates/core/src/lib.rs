//! Culturally-aware dialogue mediation: a per-session pipeline that
//! transcribes, translates and checks each utterance against social norms,
//! then delivers either the translation or a remediation to the listener.

pub mod backends;
pub mod config;
pub mod engine;
pub mod ensemble;
pub mod eval;
pub mod fsm;
pub mod middleware;
pub mod model;
pub mod replay;
