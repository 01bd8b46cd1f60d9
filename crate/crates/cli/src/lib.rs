//! Library surface of the `outagekit` application: configuration,
//! shared command plumbing, batch subcommands, and the HTTP service.
//! The binary in `main.rs` is a thin clap wrapper over these modules.

pub mod app;
pub mod commands;
pub mod config;
pub mod server;
