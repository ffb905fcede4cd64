use thiserror::Error;

/// Errors raised by the solvers, estimators and particle engines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} = {value} is outside the admissible domain {domain}")]
    Domain {
        what: &'static str,
        value: f64,
        domain: String,
    },

    #[error("initial density leaves {tail_mass:.3e} of its mass outside the interior of the grid (limit {limit:.1e}); increase the half width")]
    Truncation { tail_mass: f64, limit: f64 },

    #[error("tridiagonal factorization hit a nonpositive pivot {pivot:.3e} at row {row}")]
    Solve { row: usize, pivot: f64 },

    #[error("{what} did not converge after {iterations} iterations (last residual {residual:.3e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("heat kernel leaks {mass:.3e} of its mass past the periodic padding")]
    Alias { mass: f64 },

    #[error("bandwidth {bandwidth:.3e} is below the resolvable floor {floor:.3e}")]
    Bandwidth { bandwidth: f64, floor: f64 },

    #[error("Girsanov weight overflow: |log Z| = {log_z:.1} for particle {particle} at step {step}")]
    Overflow {
        particle: usize,
        step: usize,
        log_z: f64,
    },

    #[error("expected dimension {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("ill-conditioned diffusion matrix (condition number {cond:.3e})")]
    IllConditioned { cond: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("study cell (level {level}, seed {seed}) failed: {source}")]
    Study {
        level: f64,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
