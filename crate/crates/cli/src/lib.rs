//! Command-line harness for BiTraP: synthesis, training, evaluation,
//! prediction dumps and figures.

pub mod commands;
pub mod config;
pub mod dump;
pub mod plot;

use bitrap::Error;

/// Process exit status for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Numerical(_) => 4,
        Error::Parse { .. }
        | Error::Data(_)
        | Error::Shape(_)
        | Error::Checkpoint(_)
        | Error::Io(_)
        | Error::Json(_) => 3,
    }
}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book_cli {}
