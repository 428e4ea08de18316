//! Library half of the `crt6d` binary: the invariant-check suite and the
//! subcommand implementations, exposed so integration tests can call them
//! directly.

pub mod checks;
pub mod commands;
