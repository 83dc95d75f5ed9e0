//! Core model of an FPGA-hosted trusted execution environment: the mailbox
//! wire format, enclave runtime, manager and loader bookkeeping, the TA
//! internal API, the wallet TA and the hardware resource model.
//!
//! The crate is `no_std` with `alloc`. Threads, clocks and files live in the
//! `teeod` host crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod enclave;
pub mod fabric;
pub mod internal_api;
pub mod protocol;
pub mod resource_model;
pub mod tas;
pub mod wallet;
