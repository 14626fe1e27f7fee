/// Invalid input to [`predict_makespan`].
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DomainError {
    #[error("{0} must be positive")]
    NotPositive(&'static str),
    #[error("efficiency must lie in (0, 1], got {0}")]
    Efficiency(f64),
}

/// Analytic makespan of `n_runs` equal runs executed in waves of
/// `parallelism`: `ceil(n / p) * t * slowdown / efficiency`.
pub fn predict_makespan(
    n_runs: u64,
    per_run_seconds: f64,
    parallelism: u64,
    slowdown: f64,
    efficiency: f64,
) -> Result<f64, DomainError> {
    if n_runs == 0 {
        return Err(DomainError::NotPositive("n_runs"));
    }
    if parallelism == 0 {
        return Err(DomainError::NotPositive("parallelism"));
    }
    if !(per_run_seconds > 0.0 && per_run_seconds.is_finite()) {
        return Err(DomainError::NotPositive("per_run_seconds"));
    }
    if !(slowdown > 0.0 && slowdown.is_finite()) {
        return Err(DomainError::NotPositive("slowdown"));
    }
    if !(efficiency > 0.0 && efficiency <= 1.0) {
        return Err(DomainError::Efficiency(efficiency));
    }
    let waves = n_runs.div_ceil(parallelism) as f64;
    Ok(waves * per_run_seconds * slowdown / efficiency)
}
