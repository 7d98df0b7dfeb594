//! Stochastic control barrier certificates for networks of discrete-time
//! switched systems under a dwell-time constraint.
//!
//! The crate is organised bottom-up:
//!
//! * [`poly`]: sparse polynomial algebra with closed-form noise expectations.
//! * [`model`]: subsystem and network descriptions, validation, flattening.
//! * [`augment`]: the (state, mode, dwell counter) augmented system.
//! * [`certify`]: barrier certificate checks on sampled grids.
//! * [`dwell`]: switching-cost estimation and lifting per-mode certificates.
//! * [`compose`]: small-gain composition of subsystem certificates.
//! * [`bound`]: the finite-horizon safety bound.
//! * [`cegis`]: counterexample-guided synthesis of per-mode barriers.
//! * [`sim`]: Monte Carlo validation of the bound.

pub mod poly;
pub mod model;
pub mod augment;
pub mod grid;
pub mod certify;
pub mod dwell;
pub mod compose;
pub mod bound;
pub mod lp;
pub mod cegis;
pub mod sim;
pub mod fixtures;
pub mod project;
