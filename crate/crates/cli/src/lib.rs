//! Subcommand implementations for the `reflect` binary. Each command writes
//! its report to the given writer and returns the process exit code.

pub mod commands;

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(i32)]
pub enum Exit {
    Success = 0,
    /// The inputs were read but failed a check.
    Semantic = 1,
    /// A file or directory could not be read or parsed, or the environment is unusable.
    Environment = 2,
}

impl Exit {
    pub fn code(self) -> i32 {
        self as i32
    }
}
