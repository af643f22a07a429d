//! Structured perfect Bayesian equilibria for finite-type dynamic games with
//! asymmetric information.
//!
//! Agents carry private Markov types and observe each other's actions. The
//! solver works on the public belief (a product of per-agent marginals over
//! types), computes stage-game fixed points on a belief grid and iterates to a
//! stationary equilibrium. Verification and simulation tools sit on top.

pub mod artifacts;
pub mod belief;
pub mod cli;
pub mod finite_horizon;
pub mod game_model;
pub mod grid;
pub mod infinite_horizon;
pub mod stage_game;
pub mod simulator;
mod sweep;
pub mod verifier;
