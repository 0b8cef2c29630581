use rayon::prelude::*;
use subgfn::{FlowParams, MetricsRow, TrainFailure, Trainer};

use crate::config::{Cell, RunMatrix};
use crate::CliError;

/// Result of one cell. A failed cell keeps the rows it produced before the
/// error and the last parameters that passed the finiteness check.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub cell: Cell,
    pub rows: Vec<MetricsRow>,
    pub params: Option<FlowParams>,
    pub failure: Option<String>,
}

impl CellOutcome {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }
}

fn run_cell(matrix: &RunMatrix, cell: Cell) -> CellOutcome {
    let label = cell.stem();
    eprintln!("[{label}] start");
    let env = match matrix.env(cell.dim, cell.horizon) {
        Ok(env) => env,
        Err(e) => {
            return CellOutcome {
                cell,
                rows: Vec::new(),
                params: None,
                failure: Some(e.to_string()),
            }
        }
    };
    let outcome = Trainer::new(env, matrix.train_config(&cell))
        .map_err(|error| TrainFailure {
            error,
            step: 0,
            last_good: None,
            metrics: Vec::new(),
        })
        .and_then(|mut trainer| trainer.run().map(|rows| (trainer.into_params(), rows)));
    match outcome {
        Ok((params, rows)) => {
            if let Some(last) = rows.last() {
                eprintln!("[{label}] done: step {} l1_exact {:.4}", last.step, last.l1_exact);
            }
            CellOutcome {
                cell,
                rows,
                params: Some(params),
                failure: None,
            }
        }
        Err(f) => {
            eprintln!("[{label}] failed: {f}");
            CellOutcome {
                cell,
                failure: Some(f.to_string()),
                params: f.last_good.map(|p| *p),
                rows: f.metrics,
            }
        }
    }
}

/// Trains every cell, at most `matrix.jobs` at a time. Results come back in
/// cell order whatever the thread count.
pub fn run_experiment(matrix: &RunMatrix) -> Result<Vec<CellOutcome>, CliError> {
    let cells = matrix.cells();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = matrix.jobs {
        pool = pool.num_threads(jobs);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| cells.into_par_iter().map(|c| run_cell(matrix, c)).collect()))
}
