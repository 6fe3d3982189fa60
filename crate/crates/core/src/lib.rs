//! Numerical laboratory for mean field games on a bounded interval with
//! reflecting (zero-flux Neumann) boundaries.
//!
//! The crate couples four layers that are usually studied separately:
//!
//! * the mean field game system (backward Hamilton-Jacobi-Bellman equation
//!   coupled to a forward Fokker-Planck equation, both with Neumann boundary
//!   conditions), solved by damped fixed-point iteration in [`mfg`];
//! * the master field `U(t, x, m)` and its measure derivatives, evaluated
//!   through MFG solves and a linearized system in [`master`];
//! * the finite `N`-player Nash system on the product domain, solved on a
//!   tensor grid in [`nash`], together with the projection of the master
//!   field onto player coordinates;
//! * reflected particle dynamics driven by either feedback in [`particles`],
//!   and the convergence experiments comparing all of the above in
//!   [`convergence`].
//!
//! Everything is deterministic given a seed: random streams are keyed by
//! `(seed, path, player, step)` so results do not depend on thread scheduling.

pub mod convergence;
pub mod error;
pub mod grid;
pub mod io;
pub mod master;
pub mod mfg;
pub mod model;
pub mod nash;
pub mod particles;

pub use error::{Error, Result};
