//! Host side of the simulator: a threaded fabric, the client API, the
//! wallet client, benchmarks, configuration and the `teeod` CLI.

pub mod bench;
pub mod cli;
pub mod client;
pub mod config;
pub mod host;
pub mod images;
pub mod storage;
pub mod wallet_client;
