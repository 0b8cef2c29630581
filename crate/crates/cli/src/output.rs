//! CSV, SVG and manifest writers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use subgfn::{EntropyMode, LossKind, MetricsRow};

use crate::config::{Cell, RunMatrix};
use crate::runner::CellOutcome;
use crate::CliError;

pub const CSV_HEADER: &str =
    "step,dim,horizon,loss,seed,loss_value,l1_exact,l1_empirical,log_z,mean_entropy,modes_found,elapsed_ms";

/// One metrics row as it appears in the CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub step: u64,
    pub dim: usize,
    pub horizon: usize,
    pub loss: String,
    pub seed: u64,
    pub loss_value: f64,
    pub l1_exact: f64,
    pub l1_empirical: Option<f64>,
    pub log_z: f64,
    pub mean_entropy: Option<f64>,
    pub modes_found: usize,
    pub elapsed_ms: u64,
}

impl CsvRow {
    pub fn new(cell: &Cell, row: &MetricsRow) -> Self {
        Self {
            step: row.step,
            dim: cell.dim,
            horizon: cell.horizon,
            loss: cell.loss.kind.as_str().to_owned(),
            seed: cell.seed,
            loss_value: row.loss,
            l1_exact: row.l1_exact,
            l1_empirical: row.l1_empirical,
            log_z: row.log_z,
            mean_entropy: row.mean_entropy,
            modes_found: row.modes_found,
            elapsed_ms: row.elapsed_ms,
        }
    }

    pub fn metrics(&self) -> MetricsRow {
        MetricsRow {
            step: self.step,
            loss: self.loss_value,
            l1_exact: self.l1_exact,
            l1_empirical: self.l1_empirical,
            log_z: self.log_z,
            mean_entropy: self.mean_entropy,
            modes_found: self.modes_found,
            elapsed_ms: self.elapsed_ms,
        }
    }
}

pub fn csv_bytes<'a>(rows: impl IntoIterator<Item = &'a CsvRow>) -> Vec<u8> {
    // header is written by hand so an empty series still has one
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_HEADER.split(',')).expect("in-memory write");
    for row in rows {
        w.serialize(row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>, CliError> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| CliError::io(path, std::io::Error::other(e)))?;
    r.deserialize()
        .collect::<Result<Vec<CsvRow>, _>>()
        .map_err(|e| CliError::io(path, std::io::Error::other(e)))
}

/// Writes through a temporary sibling and renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn color(kind: LossKind) -> &'static str {
    match kind {
        LossKind::TrajectoryBalance => "#d62728",
        LossKind::SubTrajectoryBalance => "#2ca02c",
        LossKind::SubGFlowNet => "#1f77b4",
        LossKind::FlowMatching => "#ff7f0e",
        LossKind::DetailedBalance => "#9467bd",
    }
}

fn label(kind: LossKind) -> &'static str {
    match kind {
        LossKind::TrajectoryBalance => "TB",
        LossKind::SubTrajectoryBalance => "SubTB",
        LossKind::SubGFlowNet => "SubGFN",
        LossKind::FlowMatching => "FM",
        LossKind::DetailedBalance => "DB",
    }
}

/// `l1_exact` against step for one (dim, horizon), one polyline per loss.
/// Each line is the mean over seeds at every evaluated step.
pub fn render_svg(dim: usize, horizon: usize, series: &[(LossKind, Vec<(u64, f64)>)]) -> String {
    const W: f64 = 720.0;
    const H: f64 = 440.0;
    const LEFT: f64 = 64.0;
    const RIGHT: f64 = 24.0;
    const TOP: f64 = 40.0;
    const BOTTOM: f64 = 52.0;
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;

    let x_max = series
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|p| p.0))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let y_top = series
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|p| p.1))
        .fold(0.0f64, f64::max);
    let y_max = if y_top > 0.0 { (y_top * 10.0).ceil() / 10.0 } else { 1.0 };
    let sx = |x: f64| LEFT + x / x_max * plot_w;
    let sy = |y: f64| TOP + (1.0 - y / y_max) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">L1 distance, dim={dim}, horizon={horizon}</text>"#,
        W / 2.0
    );
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let (x, y) = (sx(f * x_max), sy(f * y_max));
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#e0e0e0"/>"##,
            LEFT + plot_w
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{:.2}</text>"#,
            LEFT - 6.0,
            y + 4.0,
            f * y_max
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            TOP + plot_h + 18.0,
            (f * x_max).round() as u64
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">step</text>"#,
        LEFT + plot_w / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">L1 distance</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );
    for (kind, pts) in series {
        let points: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x as f64), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline data-loss="{}" fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            kind.as_str(),
            color(*kind),
            points.join(" ")
        );
    }
    let legend_x = LEFT + plot_w - 110.0;
    let _ = writeln!(
        s,
        r#"<rect x="{legend_x}" y="{}" width="100" height="{}" fill="white" stroke="black"/>"#,
        TOP + 8.0,
        8.0 + 18.0 * series.len() as f64
    );
    for (i, (kind, _)) in series.iter().enumerate() {
        let y = TOP + 22.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="{}" stroke-width="2"/>"#,
            legend_x + 8.0,
            legend_x + 32.0,
            color(*kind)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{}</text>"#,
            legend_x + 40.0,
            y + 4.0,
            label(*kind)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Serialize)]
struct ManifestLoss {
    kind: &'static str,
    lambda: f64,
    delta: f64,
    entropy_mode: &'static str,
    entropy_rollouts: Option<usize>,
    entropy_refresh: u64,
    fm_reward_edge: bool,
}

#[derive(Serialize)]
struct ManifestCell {
    file: String,
    dim: usize,
    horizon: usize,
    loss: &'static str,
    seed: u64,
    rows: usize,
    final_l1_exact: Option<f64>,
    failure: Option<String>,
}

#[derive(Serialize)]
struct Manifest {
    version: &'static str,
    r0: f64,
    interval: &'static str,
    dims: Vec<usize>,
    horizons: Vec<usize>,
    seeds: Vec<u64>,
    losses: Vec<ManifestLoss>,
    steps: u64,
    batch_size: usize,
    lr: f64,
    lr_logz: f64,
    epsilon: f64,
    eval_every: u64,
    empirical_window: Option<usize>,
    record_time: bool,
    cells: Vec<ManifestCell>,
}

fn manifest(matrix: &RunMatrix, outcomes: &[CellOutcome]) -> Manifest {
    let t = &matrix.train;
    Manifest {
        version: env!("CARGO_PKG_VERSION"),
        r0: matrix.r0,
        interval: matrix.interval.as_str(),
        dims: matrix.dims.clone(),
        horizons: matrix.horizons.clone(),
        seeds: matrix.seeds.clone(),
        losses: matrix
            .losses
            .iter()
            .map(|l| {
                let (entropy_mode, entropy_rollouts) = match l.entropy_mode {
                    EntropyMode::ExactDp => ("dp", None),
                    EntropyMode::MonteCarlo { rollouts } => ("mc", Some(rollouts)),
                };
                ManifestLoss {
                    kind: l.kind.as_str(),
                    lambda: l.lambda,
                    delta: l.delta,
                    entropy_mode,
                    entropy_rollouts,
                    entropy_refresh: l.entropy_refresh,
                    fm_reward_edge: l.fm_reward_edge,
                }
            })
            .collect(),
        steps: t.steps,
        batch_size: t.batch_size,
        lr: t.lr_policy,
        lr_logz: t.lr_logz_flow,
        epsilon: t.epsilon,
        eval_every: t.eval_every,
        empirical_window: t.empirical_window,
        record_time: t.record_time,
        cells: outcomes
            .iter()
            .map(|o| ManifestCell {
                file: format!("cells/{}.csv", o.cell.stem()),
                dim: o.cell.dim,
                horizon: o.cell.horizon,
                loss: o.cell.loss.kind.as_str(),
                seed: o.cell.seed,
                rows: o.rows.len(),
                final_l1_exact: o.rows.last().map(|r| r.l1_exact),
                failure: o.failure.clone(),
            })
            .collect(),
    }
}

fn save_checkpoint(matrix: &RunMatrix, cell: &Cell, params: &subgfn::FlowParams, path: &Path) -> Result<(), CliError> {
    let env = matrix
        .env(cell.dim, cell.horizon)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut buf = Vec::new();
    subgfn::checkpoint::save(params, &env, &mut buf).map_err(|e| CliError::io(path, e))?;
    write_atomic(path, &buf)
}

/// Writes everything under `matrix.out`:
///
/// * `cells/<stem>.csv` per cell, plus `cells/<stem>.last_good.ckpt` for a
///   failed cell (and `<stem>.ckpt` for every cell with `save_checkpoints`)
/// * `metrics.csv` with all rows in cell order
/// * `l1_d<dim>_h<horizon>.svg` per grid
/// * `manifest.json`
pub fn write_outputs(matrix: &RunMatrix, outcomes: &[CellOutcome]) -> Result<(), CliError> {
    let out = &matrix.out;
    let cells_dir = out.join("cells");
    fs::create_dir_all(&cells_dir).map_err(|e| CliError::io(&cells_dir, e))?;

    let mut all = Vec::new();
    for o in outcomes {
        let rows: Vec<CsvRow> = o.rows.iter().map(|r| CsvRow::new(&o.cell, r)).collect();
        write_atomic(&cells_dir.join(format!("{}.csv", o.cell.stem())), &csv_bytes(&rows))?;
        all.extend(rows);
        if let Some(params) = &o.params {
            if o.failed() {
                let path = cells_dir.join(format!("{}.last_good.ckpt", o.cell.stem()));
                save_checkpoint(matrix, &o.cell, params, &path)?;
            } else if matrix.save_checkpoints {
                let path = cells_dir.join(format!("{}.ckpt", o.cell.stem()));
                save_checkpoint(matrix, &o.cell, params, &path)?;
            }
        }
    }
    write_atomic(&out.join("metrics.csv"), &csv_bytes(&all))?;

    for &dim in &matrix.dims {
        for &horizon in &matrix.horizons {
            let series: Vec<(LossKind, Vec<(u64, f64)>)> = matrix
                .losses
                .iter()
                .map(|spec| {
                    let mut by_step: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
                    for o in outcomes.iter().filter(|o| {
                        o.cell.dim == dim && o.cell.horizon == horizon && o.cell.loss.kind == spec.kind
                    }) {
                        for r in &o.rows {
                            let e = by_step.entry(r.step).or_default();
                            e.0 += r.l1_exact;
                            e.1 += 1;
                        }
                    }
                    let pts = by_step.into_iter().map(|(s, (sum, n))| (s, sum / n as f64)).collect();
                    (spec.kind, pts)
                })
                .collect();
            let svg = render_svg(dim, horizon, &series);
            write_atomic(&out.join(format!("l1_d{dim}_h{horizon}.svg")), svg.as_bytes())?;
        }
    }

    let json = serde_json::to_string_pretty(&manifest(matrix, outcomes)).expect("manifest serializes");
    write_atomic(&out.join("manifest.json"), format!("{json}\n").as_bytes())
}
