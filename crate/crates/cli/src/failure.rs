use std::fmt;

use kswap::Error;

/// A command failure and the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub const CONFIG: u8 = 2;
    pub const GATE: u8 = 3;
    pub const INPUT: u8 = 4;
    pub const MISMATCH: u8 = 5;
    pub const INTERNAL: u8 = 1;

    pub fn config(message: impl Into<String>) -> Self {
        Self { code: Self::CONFIG, message: message.into() }
    }

    pub fn gate(message: impl Into<String>) -> Self {
        Self { code: Self::GATE, message: message.into() }
    }

    pub fn input(message: impl Into<String>) -> Self {
        Self { code: Self::INPUT, message: message.into() }
    }

    pub fn mismatch(message: impl Into<String>) -> Self {
        Self { code: Self::MISMATCH, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Validation(_) => Self::CONFIG,
            Error::Parse { .. } | Error::Checkpoint { .. } | Error::Io(_) | Error::Json(_) => Self::INPUT,
            Error::Shape { .. } | Error::Contract(_) => Self::INTERNAL,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::input(e.to_string())
    }
}
