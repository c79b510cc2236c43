// Negated float guards (`!(x > 0.0)`) deliberately send NaN into the
// error branch; the positive rewrite would let NaN through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Library half of the `gfnn` command-line runner: config parsing,
//! command implementations, and the text formats the binary speaks.
//! The binary in `main.rs` only parses arguments and maps errors to
//! exit codes.

pub mod commands;
pub mod config;
pub mod textio;

use gfnn::Error;

/// Process exit code for an error: 2 rejected configuration,
/// 3 numeric failure (diverged solve, non-finite state, domain exit),
/// 4 file problems.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_) | Error::DimensionMismatch { .. } => 2,
        Error::SolverDiverged { .. }
        | Error::NonFinite(_)
        | Error::DomainViolation(_) => 3,
        Error::RolloutAborted { cause, .. } => exit_code(cause),
        Error::MalformedFile { .. } | Error::Io { .. } => 4,
    }
}
