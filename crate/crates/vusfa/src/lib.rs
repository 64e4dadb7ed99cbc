//! Goal-conditioned transfer reinforcement learning on multi-scene gridworlds.
//!
//! The crate trains and compares four agent variants with asynchronous
//! advantage actor-critic:
//!
//! * `GVF` — a siamese goal-conditioned baseline with a direct scalar value head,
//! * `USFA` — universal successor features: the value decouples as `V = ψᵀω`,
//! * `USFA_SFDP` — adds a successor-feature-dependent policy (the policy reads
//!   ψ through a gradient-stopped edge),
//! * `VUSFA` — adds a variational siamese bottleneck with an adaptive KL
//!   penalty weight β.
//!
//! Everything runs on a deterministic gridworld stand-in for a visual
//! navigation task: scenes are small occupancy grids, observations are stacks
//! of the four most recent one-hot cell frames, and goals are cells of the
//! same scene. The crate ships its own dense-network kernel (reverse-mode
//! tape, reparameterized sampling, a shared RMSProp optimizer and a
//! finite-difference checker), so training is reproducible down to the bit in
//! single-worker mode.
//!
//! Entry points:
//! * [`grid`] — scenes, episodes, observations and exact path oracles.
//! * [`tensor`] / [`tape`] / [`optim`] — the numeric kernel.
//! * [`model`] — the four network variants.
//! * [`trainer`] — the asynchronous training loop.
//! * [`eval`] — zero-shot and fine-tuning transfer protocols.
//! * [`commands`] — the operations behind the `vusfa` binary.
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod eval;
pub mod fd;
pub mod grid;
pub mod model;
pub mod noise;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod verify;
