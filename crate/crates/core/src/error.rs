use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} outside trajectory range [{lo}, {hi}]")]
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },
    #[error("quaternion polynomial evaluates to a degenerate rotation (norm {norm:.3e}) at t={t}")]
    DegenerateRotation { t: f64, norm: f64 },
    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("point behind camera (z = {z:.3e})")]
    BehindCamera { z: f64 },
    #[error("invalid depth {d}")]
    InvalidDepth { d: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("image {h}x{w} smaller than {win}x{win} window")]
    ImageTooSmall { h: usize, w: usize, win: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("mismatched forward/backward state: {0}")]
    StateMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at iteration {iter}: {what}")]
    Diverged { iter: usize, what: String },
}
