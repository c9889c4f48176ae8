use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// The right-hand side produced a NaN or infinite entry.
    #[error("integration failure at t = {t}: non-finite right-hand side")]
    NonFiniteRhs { t: f64 },

    #[error("step size underflow at t = {t}: h = {h} fell below h_min = {h_min}")]
    StepSizeUnderflow { t: f64, h: f64, h_min: f64 },

    #[error("AB2 history spacing {spacing} does not match step size {h}")]
    HistoryMismatch { spacing: f64, h: f64 },

    #[error("step {step} at t = {t} failed: {source}")]
    Step {
        step: usize,
        t: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("subsystem {subsystem} failed on exchange interval {interval}: {source}")]
    Interval {
        interval: usize,
        subsystem: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid step control: {0}")]
    StepControl(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("duplicate sample time {0} in extrapolation fit")]
    DuplicateSampleTime(f64),

    #[error("extrapolation degree {degree} needs {needed} samples, got {got}")]
    NotEnoughSamples {
        degree: usize,
        needed: usize,
        got: usize,
    },

    #[error("[{a}, {b}] is outside the support [{lo}, {hi}]")]
    OutsideSupport { a: f64, b: f64, lo: f64, hi: f64 },

    #[error("order estimate needs at least two positive finite errors, got {0}")]
    TooFewLevels(usize),

    #[error("invalid oracle parameters: {0}")]
    Oracle(String),
}

pub type Result<T> = std::result::Result<T, Error>;
