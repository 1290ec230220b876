//! Adversarial tug-of-war training sandbox.
//!
//! Two tabular policies play a miniature red-team game inside a 28-token
//! arena: an attacker learns to phrase harmful queries so a defender
//! answers them, and the defender learns to refuse exactly those queries
//! while staying helpful on benign ones. Both sides train with
//! group-relative policy optimization, alternating over a fixed schedule,
//! with data augmentation, quality filtering, and drift monitoring
//! between the phases.

pub mod arena;
pub mod augment;
pub mod grpo;
pub mod judge;
pub mod monitor;
pub mod orchestrator;
pub mod policy;
pub mod rewards;
pub mod stream;
