use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("ball moment of y1^{a} y2^{b} / |y|^3 is not integrable (need a+b >= 2)")]
    NonIntegrable { a: u32, b: u32 },

    #[error("quadrature weights singular at point {0}: stencil too sparse for the horizon")]
    WeightsSingular(usize),

    #[error("frame degenerate at point {0}: no intact bonds")]
    FrameDegenerate(usize),

    #[error("assembly error: {0}")]
    Assembly(String),

    #[error("linear solve failed: {0}")]
    SolveFailed(String),

    #[error("critical stretch radicand is non-positive ({0})")]
    CriterionInvalid(f64),

    #[error("fracture subiterations exceeded {cap} at step {step}")]
    SubiterationDiverged { step: usize, cap: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
