//! Process exit codes and the error type carrying them.

use std::fmt;

use pgsvc::Error;

pub const GENERIC: u8 = 1;
pub const UNREADABLE_INPUT: u8 = 2;
pub const BAD_DIMENSIONS: u8 = 3;
pub const DIVERGENCE: u8 = 4;
pub const FORMAT: u8 = 5;

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }

    pub fn generic(error: impl Into<anyhow::Error>) -> Self {
        Self::new(GENERIC, error)
    }

    /// One-line message including the cause chain.
    pub fn message(&self) -> String {
        format!("{:#}", self.error)
    }
}

impl fmt::Debug for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "exit {}: {:#}", self.code, self.error)
    }
}

/// Exit code for a library error raised outside input loading.
pub fn classify(e: &Error) -> u8 {
    match e {
        Error::Divergence(_) => DIVERGENCE,
        Error::Format(_) | Error::CorruptStream(_) | Error::Truncated { .. } => FORMAT,
        Error::Shape { .. } => BAD_DIMENSIONS,
        _ => GENERIC,
    }
}

/// Exit code for a library error raised while reading input frames.
fn classify_input(e: &Error) -> u8 {
    match e {
        Error::RejectedInput(_) | Error::Shape { .. } => BAD_DIMENSIONS,
        Error::Io(_) | Error::Image(_) | Error::Empty(_) => UNREADABLE_INPUT,
        other => classify(other),
    }
}

pub trait ResultExt<T> {
    /// Library error from codec work.
    fn core(self) -> Result<T, Failure>;
    /// Library error while loading input; `ctx` names the input.
    fn input(self, ctx: impl FnOnce() -> String) -> Result<T, Failure>;
}

impl<T> ResultExt<T> for Result<T, Error> {
    fn core(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::new(classify(&e), e))
    }

    fn input(self, ctx: impl FnOnce() -> String) -> Result<T, Failure> {
        self.map_err(|e| Failure::new(classify_input(&e), anyhow::Error::from(e).context(ctx())))
    }
}

pub trait Fail<T> {
    /// Any other failure: exit code 1.
    fn fail(self) -> Result<T, Failure>;
}

impl<T> Fail<T> for anyhow::Result<T> {
    fn fail(self) -> Result<T, Failure> {
        self.map_err(Failure::generic)
    }
}
