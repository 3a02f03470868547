use thiserror::Error;

/// Pipeline stage, used to tag errors that escape `pipeline::run`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Precheck,
    Discovery,
    Refinement,
    Evidence,
    Reduction,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Precheck => "precheck",
            Stage::Discovery => "discovery",
            Stage::Refinement => "refinement",
            Stage::Evidence => "evidence",
            Stage::Reduction => "reduction",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{name} is not defined for dimension {dim}")]
    UnsupportedDimension { name: String, dim: usize },

    #[error("unknown problem `{0}`")]
    UnknownProblem(String),

    #[error("non-finite numeric input: {0}")]
    NumericInput(String),

    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("likelihood is identically flat over the prior box")]
    DegenerateProblem,

    #[error("log-likelihood at the prior center is not finite ({0})")]
    CenterEvaluation(f64),

    #[error("no curvature pairs stored")]
    MissingCurvature,

    #[error("no modes found ({summary})")]
    NoModesFound {
        best_location: Option<Vec<f64>>,
        best_logl: f64,
        summary: String,
    },

    #[error("every refinement candidate was rejected: {}", reasons.join("; "))]
    NoValidMaxima { reasons: Vec<String> },

    #[error("hessian evaluation failed: {0}")]
    HessianFailed(String),

    #[error("negative-hessian eigenvalue {value} at index {index} indicates a saddle direction")]
    SaddleDirection { index: usize, value: f64 },

    #[error("{stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn at(self, stage: Stage) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Strips any stage tag.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }

    /// Short machine-readable class used by the benchmark CSV.
    pub fn class(&self) -> &'static str {
        match self.root() {
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::UnsupportedDimension { .. } => "unsupported_dimension",
            Error::UnknownProblem(_) => "unknown_problem",
            Error::NumericInput(_) => "numeric_input",
            Error::NotPositiveDefinite { .. } => "not_positive_definite",
            Error::DegenerateProblem => "degenerate_problem",
            Error::CenterEvaluation(_) => "center_evaluation",
            Error::MissingCurvature => "missing_curvature",
            Error::NoModesFound { .. } => "no_modes_found",
            Error::NoValidMaxima { .. } => "no_valid_maxima",
            Error::HessianFailed(_) => "hessian_failed",
            Error::SaddleDirection { .. } => "saddle_direction",
            Error::Stage { .. } => unreachable!(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
