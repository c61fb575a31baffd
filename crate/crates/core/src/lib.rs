//! Core library for simulating frequency control of nonlinear swing-equation
//! power networks under a bilayered (predictive + real-time safety) controller.
//!
//! The crate is organised as a pipeline:
//!
//! * [`netmodel`] — network data (topology, inertia, damping, injections),
//!   disturbance profiles, and synchronous equilibria of the nonlinear model.
//! * [`dynamics`] — the differential-algebraic swing dynamics and a fixed-step
//!   RK4 closed-loop simulator with per-step audit recording.
//! * [`prediction`] — the linearised prediction model, its discretisations,
//!   and assembly of the strongly convex MPC quadratic program together with
//!   agent-ownership metadata and a structural locality audit.
//! * [`solvers`] — a dense active-set reference QP solver, projected
//!   saddle-point dynamics, and a message-passing distributed executor that
//!   reproduces the centralised iterates bit for bit.
//! * [`controller`] — the two control layers: a sampled MPC bottom layer
//!   (stability filter + low-pass actuation) and a frequency-barrier top
//!   layer, composed into a [`dynamics::ControlLaw`].
//! * [`monitor`] — energy functions, invariant-level-set estimates, and the
//!   safety / dissipation / cost audits run against recorded trajectories.
//!
//! All frequencies are handled internally in rad/s; helpers in [`units`]
//! convert to and from Hz at the boundaries.

pub mod controller;
pub mod dynamics;
pub mod monitor;
pub mod netgen;
pub mod netmodel;
pub mod prediction;
pub mod solvers;
pub mod sparse;
pub mod units;
