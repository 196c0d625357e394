//! Replicates fanned out over a thread pool.
//!
//! Each replicate draws only from its own substreams and outcomes are
//! folded in replicate order, so the report does not depend on the
//! number of threads.

use poolcal_core::simulation::{aggregate, run_replicate, SimulationReport};
use poolcal_core::{FitMethod, ScenarioConfig};
use rayon::prelude::*;

use crate::CliError;

/// `threads = None` lets the pool pick one thread per core.
pub fn run_parallel(
    config: &ScenarioConfig,
    methods: &[FitMethod],
    threads: Option<usize>,
) -> Result<SimulationReport, CliError> {
    config.validate()?;
    if methods.is_empty() {
        return Err(CliError::Usage("no methods requested".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    let outcomes = pool.install(|| {
        (0..config.replicates)
            .into_par_iter()
            .map(|r| run_replicate(config, methods, r))
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok(aggregate(config, methods, &outcomes)?)
}

/// Parses a comma-separated method list such as `full,internalized`.
pub fn parse_methods(list: &str) -> Result<Vec<FitMethod>, CliError> {
    let mut out = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let m: FitMethod = name.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage("empty method list".into()));
    }
    Ok(out)
}
