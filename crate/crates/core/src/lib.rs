//! Simulation of hardware-enabled mechanisms for governing AI accelerators.
//!
//! Modules mirror the mechanisms: [`chipmodel`] is the virtual accelerator,
//! [`licensing`] gates it with offline licenses, [`cluster`] limits who it
//! can talk to, [`geoloc`] locates it from signed round trips, [`attest`]
//! accounts for the work it did, and [`adversary`] runs the attack catalogue
//! against all of them. [`scenario`] ties them into declarative runs and
//! [`cli`] exposes those runs on the command line.

pub mod adversary;
pub mod attest;
pub mod chipmodel;
pub mod cli;
pub mod cluster;
pub mod crypto;
pub mod geoloc;
pub mod licensing;
pub mod netsim;
pub mod scenario;
