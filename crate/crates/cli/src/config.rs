//! Flags, config files and the resolved run matrix.

use std::path::{Path, PathBuf};

use clap::Parser;
use serde::{Deserialize, Serialize};
use subgfn::{EntropyMode, Hypergrid, IntervalClosure, LossKind, LossSpec, TrainConfig};

use crate::CliError;

pub const DEFAULT_DIMS: [usize; 3] = [2, 3, 4];
pub const DEFAULT_HORIZONS: [usize; 3] = [8, 16, 32];
pub const DEFAULT_LOSSES: [LossKind; 3] = [
    LossKind::TrajectoryBalance,
    LossKind::SubTrajectoryBalance,
    LossKind::SubGFlowNet,
];
pub const DEFAULT_R0: f64 = 0.1;
pub const DEFAULT_ENTROPY_ROLLOUTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EntropyModeArg {
    Dp,
    Mc,
}

/// Sweep hypergrid GFlowNet training runs and write metrics and charts.
///
/// List flags take comma-separated values or repeat.
#[derive(Debug, Default, Parser)]
#[command(name = "subgfn", version)]
pub struct Args {
    /// Grid dimensions [default: 2,3,4].
    #[arg(long, value_delimiter = ',')]
    pub dim: Vec<usize>,
    /// Grid side lengths [default: 8,16,32].
    #[arg(long, value_delimiter = ',')]
    pub horizon: Vec<usize>,
    /// Base reward R0 [default: 0.1].
    #[arg(long)]
    pub r0: Option<f64>,
    /// Reward band closure: open or half-open.
    #[arg(long)]
    pub interval: Option<IntervalClosure>,
    /// Objectives: fm, db, tb, subtb, subgfn [default: tb,subtb,subgfn].
    #[arg(long, value_delimiter = ',')]
    pub loss: Vec<LossKind>,
    /// SubTB decay [default: 0.99].
    #[arg(long)]
    pub lambda: Option<f64>,
    /// FM/DB flow regulariser [default: 1e-6].
    #[arg(long)]
    pub delta: Option<f64>,
    /// Optimizer steps per cell [default: 20000].
    #[arg(long)]
    pub steps: Option<u64>,
    /// Trajectories per step [default: 8].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seeds [default: 0].
    #[arg(long, value_delimiter = ',')]
    pub seed: Vec<u64>,
    /// Policy learning rate [default: 1e-3].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Learning rate for log Z and the log state flows [default: 0.1].
    #[arg(long)]
    pub lr_logz: Option<f64>,
    /// Uniform exploration mixed into sampling [default: 0].
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Steps between metric rows [default: 250].
    #[arg(long)]
    pub eval_every: Option<u64>,
    /// Sub-network entropy: exact DP or Monte Carlo [default: dp].
    #[arg(long, value_enum)]
    pub entropy_mode: Option<EntropyModeArg>,
    /// Rollouts per estimate in Monte Carlo entropy mode [default: 64].
    #[arg(long)]
    pub entropy_rollouts: Option<usize>,
    /// Steps before a cached entropy is recomputed [default: 100].
    #[arg(long)]
    pub entropy_refresh: Option<u64>,
    /// Cells run concurrently (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory [default: results].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Flat JSON file using the flag names as keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Fill the elapsed_ms column. Makes output non-reproducible.
    #[arg(long)]
    pub record_time: bool,
    /// Write final parameters of every cell next to its CSV.
    #[arg(long)]
    pub save_checkpoints: bool,
}

/// Accepts `"dim": 2` as well as `"dim": [2, 3]`.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> OneOrMany<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            OneOrMany::One(x) => vec![x],
            OneOrMany::Many(xs) => xs,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct FileConfig {
    dim: Option<OneOrMany<usize>>,
    horizon: Option<OneOrMany<usize>>,
    r0: Option<f64>,
    interval: Option<String>,
    loss: Option<OneOrMany<String>>,
    lambda: Option<f64>,
    delta: Option<f64>,
    steps: Option<u64>,
    batch_size: Option<usize>,
    seed: Option<OneOrMany<u64>>,
    lr: Option<f64>,
    lr_logz: Option<f64>,
    epsilon: Option<f64>,
    eval_every: Option<u64>,
    entropy_mode: Option<EntropyModeArg>,
    entropy_rollouts: Option<usize>,
    entropy_refresh: Option<u64>,
    jobs: Option<usize>,
    out: Option<PathBuf>,
    record_time: Option<bool>,
    save_checkpoints: Option<bool>,
}

/// Fully resolved sweep: every cell is `dims x horizons x losses x seeds`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMatrix {
    pub dims: Vec<usize>,
    pub horizons: Vec<usize>,
    pub losses: Vec<LossSpec>,
    pub seeds: Vec<u64>,
    pub r0: f64,
    pub interval: IntervalClosure,
    /// Shared settings; `loss` and `seed` are replaced per cell.
    pub train: TrainConfig,
    pub jobs: Option<usize>,
    pub out: PathBuf,
    pub save_checkpoints: bool,
}

/// One point of the sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub dim: usize,
    pub horizon: usize,
    pub loss: LossSpec,
    pub seed: u64,
}

impl Cell {
    /// File stem shared by this cell's outputs.
    pub fn stem(&self) -> String {
        format!("d{}_h{}_{}_s{}", self.dim, self.horizon, self.loss.kind, self.seed)
    }
}

impl RunMatrix {
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &dim in &self.dims {
            for &horizon in &self.horizons {
                for &loss in &self.losses {
                    for &seed in &self.seeds {
                        cells.push(Cell { dim, horizon, loss, seed });
                    }
                }
            }
        }
        cells
    }

    pub fn env(&self, dim: usize, horizon: usize) -> subgfn::Result<Hypergrid> {
        Hypergrid::with_options(dim, horizon, self.r0, self.interval, subgfn::env::DEFAULT_STATE_CAP)
    }

    pub fn train_config(&self, cell: &Cell) -> TrainConfig {
        TrainConfig {
            loss: cell.loss,
            seed: cell.seed,
            ..self.train.clone()
        }
    }
}

fn read_file(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
}

fn config_err(e: subgfn::Error) -> CliError {
    CliError::Config(e.to_string())
}

/// Flag values win over the file, which wins over the defaults.
fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn pick_list<T: Clone>(flag: Vec<T>, file: Option<Vec<T>>, default: &[T]) -> Vec<T> {
    if !flag.is_empty() {
        flag
    } else {
        file.unwrap_or_else(|| default.to_vec())
    }
}

/// Resolves parsed flags and the optional config file into a validated matrix.
pub fn resolve(args: Args) -> Result<RunMatrix, CliError> {
    let file = match &args.config {
        Some(path) => read_file(path)?,
        None => FileConfig::default(),
    };

    let file_losses = file
        .loss
        .map(|l| {
            l.into_vec()
                .iter()
                .map(|s| s.parse::<LossKind>())
                .collect::<subgfn::Result<Vec<_>>>()
        })
        .transpose()
        .map_err(config_err)?;
    let file_interval = file
        .interval
        .map(|s| s.parse::<IntervalClosure>())
        .transpose()
        .map_err(config_err)?;

    let dims = pick_list(args.dim, file.dim.map(OneOrMany::into_vec), &DEFAULT_DIMS);
    let horizons = pick_list(args.horizon, file.horizon.map(OneOrMany::into_vec), &DEFAULT_HORIZONS);
    let kinds = pick_list(args.loss, file_losses, &DEFAULT_LOSSES);
    let seeds = pick_list(args.seed, file.seed.map(OneOrMany::into_vec), &[0]);
    for (name, empty) in [
        ("dim", dims.is_empty()),
        ("horizon", horizons.is_empty()),
        ("loss", kinds.is_empty()),
        ("seed", seeds.is_empty()),
    ] {
        if empty {
            return Err(CliError::Config(format!("`{name}` needs at least one value")));
        }
    }
    for (i, k) in kinds.iter().enumerate() {
        if kinds[..i].contains(k) {
            return Err(CliError::Config(format!("loss `{k}` listed twice")));
        }
    }

    let rollouts = pick(args.entropy_rollouts, file.entropy_rollouts, DEFAULT_ENTROPY_ROLLOUTS);
    let entropy_mode = match pick(args.entropy_mode, file.entropy_mode, EntropyModeArg::Dp) {
        EntropyModeArg::Dp => EntropyMode::ExactDp,
        EntropyModeArg::Mc => EntropyMode::MonteCarlo { rollouts },
    };
    let base = LossSpec::new(LossKind::TrajectoryBalance);
    let template = LossSpec {
        delta: pick(args.delta, file.delta, base.delta),
        lambda: pick(args.lambda, file.lambda, base.lambda),
        entropy_mode,
        entropy_refresh: pick(args.entropy_refresh, file.entropy_refresh, base.entropy_refresh),
        ..base
    };
    let losses: Vec<LossSpec> = kinds.into_iter().map(|kind| LossSpec { kind, ..template }).collect();

    let defaults = TrainConfig::new(template);
    let train = TrainConfig {
        steps: pick(args.steps, file.steps, defaults.steps),
        batch_size: pick(args.batch_size, file.batch_size, defaults.batch_size),
        lr_policy: pick(args.lr, file.lr, defaults.lr_policy),
        lr_logz_flow: pick(args.lr_logz, file.lr_logz, defaults.lr_logz_flow),
        epsilon: pick(args.epsilon, file.epsilon, defaults.epsilon),
        eval_every: pick(args.eval_every, file.eval_every, defaults.eval_every),
        record_time: args.record_time || file.record_time.unwrap_or(false),
        ..defaults
    };

    let jobs = args.jobs.or(file.jobs);
    if jobs == Some(0) {
        return Err(CliError::Config("`jobs` must be >= 1".into()));
    }

    let matrix = RunMatrix {
        dims,
        horizons,
        losses,
        seeds,
        r0: pick(args.r0, file.r0, DEFAULT_R0),
        interval: pick(args.interval, file_interval, IntervalClosure::Open),
        train,
        jobs,
        out: pick(args.out, file.out, PathBuf::from("results")),
        save_checkpoints: args.save_checkpoints || file.save_checkpoints.unwrap_or(false),
    };
    for spec in &matrix.losses {
        matrix.train_config(&Cell {
            dim: 0,
            horizon: 0,
            loss: *spec,
            seed: 0,
        })
        .validate()
        .map_err(config_err)?;
    }
    for &dim in &matrix.dims {
        for &horizon in &matrix.horizons {
            matrix
                .env(dim, horizon)
                .map_err(|e| CliError::Config(format!("dim {dim}, horizon {horizon}: {e}")))?;
        }
    }
    Ok(matrix)
}

/// Parses `argv` (program name first) into a matrix.
pub fn parse_config<I, T>(argv: I) -> Result<RunMatrix, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = Args::try_parse_from(argv).map_err(CliError::Usage)?;
    resolve(args)
}
