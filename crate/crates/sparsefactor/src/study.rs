//! Monte Carlo studies with replications spread over a thread pool.

use rayon::prelude::*;
use sparsefactor_core::simulation::{run_replication, summarize, StudyConfig, StudyReport};

use crate::error::{CliError, CliResult};

/// Environment variable read when no thread count is given.
pub const THREADS_ENV: &str = "SPARSEFACTOR_THREADS";

/// Thread count from the argument, then the environment, else 0 (rayon's
/// default).
pub fn resolve_threads(arg: Option<usize>) -> CliResult<usize> {
    if let Some(t) = arg {
        return Ok(t);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{THREADS_ENV} must be a nonnegative integer, got `{v}`"))),
        Err(_) => Ok(0),
    }
}

/// Runs every replication on a pool of `threads` workers (0 = one per
/// core). The report does not depend on the thread count.
pub fn run_study_parallel(config: &StudyConfig, threads: usize) -> CliResult<StudyReport> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start thread pool: {e}")))?;
    let outcomes: Vec<_> = pool.install(|| {
        (0..config.replications)
            .into_par_iter()
            .map(|rep| run_replication(config, rep))
            .collect()
    });
    Ok(summarize(config, &outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use sparsefactor_core::simulation::{run_study, TrueModel};

    #[test]
    fn parallel_matches_sequential() {
        let mut config = StudyConfig::new(TrueModel::A, 100, 3, 5);
        config.path.n_rho = 8;
        let seq = run_study(&config).unwrap();
        let par = run_study_parallel(&config, 2).unwrap();
        assert_eq!(seq, par);
    }
}
