//! Library surface of the command-line harness; the binary in `main.rs` is a
//! thin argument-parsing layer over these modules.

pub mod bench;
pub mod reportcmd;
pub mod runner;
