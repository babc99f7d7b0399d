//! Solver core for 1-D nonlinear backward stochastic PDEs with Neumann
//! boundary conditions.
//!
//! The equation class treated here is
//!
//! ```text
//! -du = [ 1/2 (sigma^2 + sigma_bar^2) u_xx + sigma psi_x + Gamma(x,t,u,u_x,psi) ] dt
//!       - psi dW,        u_x(0,t) = u_x(b,t) = 0,   u(x,T) = G(x),
//! ```
//!
//! discretised in space by a local discontinuous Galerkin (LDG) method and
//! marched backward in time over the resulting coefficient-space BSDE by one
//! of two engines:
//!
//! * deep backward dynamic programming ([`march::solve_dbdp`]): one pair of
//!   small feedforward networks per time step, trained on simulated Brownian
//!   states;
//! * least-squares Monte Carlo ([`march::solve_lsmc`]): conditional
//!   expectations represented by polynomial regression in the scalar
//!   Brownian state.
//!
//! The crate is `no_std` + `alloc`; everything that touches files, clocks or
//! command lines lives in the companion `bspde-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod basis;
pub mod ldg;
pub mod linalg;
pub mod march;
pub mod mesh;
pub mod nn;
pub mod problems;
pub mod projection;

mod error;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;
