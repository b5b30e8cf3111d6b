//! Experiment harness: configuration, training, evaluation and the
//! commands behind the `waitk` binary.

pub mod commands;
pub mod config;
pub mod eval;
pub mod train;

use waitk::Error;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Schema(_) | Error::Io(_) | Error::Json(_) => 3,
        Error::NonFinite(_) => 4,
        Error::Shape(_) | Error::Contract(_) | Error::Policy(_) => 1,
    }
}
