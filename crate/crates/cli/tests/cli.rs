use std::fs;
use std::path::Path;
use std::process::Command;

use subgfn::{Hypergrid, LossKind};
use subgfn_cli::output::{csv_bytes, read_csv, render_svg};
use subgfn_cli::{parse_config, run_experiment, write_outputs, CliError, CsvRow, CSV_HEADER};

fn parse(args: &[&str]) -> Result<subgfn_cli::RunMatrix, CliError> {
    parse_config(std::iter::once("subgfn").chain(args.iter().copied()))
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_subgfn"))
}

#[test]
fn single_cell_matrix() {
    let m = parse(&["--dim", "2", "--horizon", "8", "--loss", "subgfn", "--seed", "1", "--steps", "20000"]).unwrap();
    let cells = m.cells();
    assert_eq!(cells.len(), 1);
    assert_eq!(cells[0].loss.kind, LossKind::SubGFlowNet);
    assert_eq!((cells[0].dim, cells[0].horizon, cells[0].seed), (2, 8, 1));
    assert_eq!(m.train.steps, 20_000);
}

#[test]
fn subtb_lambda() {
    let m = parse(&["--loss", "subtb", "--lambda", "0.99"]).unwrap();
    assert_eq!(m.losses.len(), 1);
    assert_eq!(m.losses[0].kind, LossKind::SubTrajectoryBalance);
    assert_eq!(m.losses[0].lambda, 0.99);
}

#[test]
fn default_matrix_has_27_cells() {
    let m = parse(&[]).unwrap();
    assert_eq!(m.cells().len(), 27);
    assert_eq!(m.r0, 0.1);
    assert_eq!(m.train.batch_size, 8);
}

#[test]
fn lists_accept_commas_and_repeats() {
    let a = parse(&["--dim", "2,3", "--seed", "4", "--seed", "5"]).unwrap();
    assert_eq!(a.dims, vec![2, 3]);
    assert_eq!(a.seeds, vec![4, 5]);
}

#[test]
fn config_errors_exit_2() {
    let e = parse(&["--dim", "9", "--horizon", "32"]).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    assert!(parse(&["--loss", "tb,tb"]).is_err());
    assert!(parse(&["--lambda", "0"]).is_err());
    assert_eq!(parse(&["--bogus"]).unwrap_err().exit_code(), 2);
    assert_eq!(parse(&["--help"]).unwrap_err().exit_code(), 0);

    let status = bin().args(["--dim", "9", "--horizon", "32"]).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn config_file_precedence_and_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    fs::write(
        &path,
        r#"{"dim": 3, "horizon": [8, 16], "loss": ["tb", "subgfn"], "lr-logz": 0.05, "steps": 10}"#,
    )
    .unwrap();
    let p = path.to_str().unwrap();
    let m = parse(&["--config", p, "--steps", "7"]).unwrap();
    assert_eq!(m.dims, vec![3]);
    assert_eq!(m.horizons, vec![8, 16]);
    assert_eq!(m.losses.len(), 2);
    assert_eq!(m.train.lr_logz_flow, 0.05);
    assert_eq!(m.train.steps, 7);

    fs::write(&path, r#"{"dim": 2, "horizn": 8}"#).unwrap();
    let e = parse(&["--config", p]).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    assert!(e.to_string().contains("horizn"), "{e}");
}

fn small_run(out: &Path, jobs: &str) -> subgfn_cli::RunMatrix {
    let out = out.to_str().unwrap();
    parse(&[
        "--dim", "2", "--horizon", "4", "--loss", "fm,db,tb,subtb,subgfn", "--seed", "0,1", "--steps", "300",
        "--eval-every", "100", "--jobs", jobs, "--out", out,
    ])
    .unwrap()
}

#[test]
fn outputs_round_trip_and_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));

    let m = small_run(&a, "1");
    let outcomes = run_experiment(&m).unwrap();
    assert!(outcomes.iter().all(|o| !o.failed()));
    write_outputs(&m, &outcomes).unwrap();
    let m2 = small_run(&b, "3");
    write_outputs(&m2, &run_experiment(&m2).unwrap()).unwrap();

    let combined = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(combined, fs::read(b.join("metrics.csv")).unwrap());
    assert!(String::from_utf8_lossy(&combined).starts_with(CSV_HEADER));
    for o in &outcomes {
        let file = format!("cells/{}.csv", o.cell.stem());
        assert_eq!(fs::read(a.join(&file)).unwrap(), fs::read(b.join(&file)).unwrap());
        // every row parses back to the in-memory value
        let rows = read_csv(&a.join(&file)).unwrap();
        let back: Vec<_> = rows.iter().map(CsvRow::metrics).collect();
        assert_eq!(back, o.rows);
        assert_eq!(rows.len(), 3);
    }
    assert_eq!(read_csv(&a.join("metrics.csv")).unwrap().len(), 30);

    let svg = fs::read_to_string(a.join("l1_d2_h4.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 5);
    for color in ["#d62728", "#2ca02c", "#1f77b4"] {
        assert!(svg.contains(color));
    }
    for name in ["TB", "SubTB", "SubGFN"] {
        assert!(svg.contains(&format!(">{name}</text>")));
    }

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["r0"], 0.1);
    assert_eq!(manifest["lr"], 1e-3);
    assert_eq!(manifest["lr_logz"], 0.1);
    assert_eq!(manifest["seeds"], serde_json::json!([0, 1]));
    assert_eq!(manifest["losses"][3]["lambda"], 0.99);
    assert_eq!(manifest["losses"][0]["delta"], 1e-6);
    assert_eq!(manifest["cells"].as_array().unwrap().len(), 10);
    assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn row_count_follows_eval_interval() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let m = parse(&["--dim", "2", "--horizon", "3", "--loss", "tb", "--steps", "1000", "--eval-every", "300", "--out", out])
        .unwrap();
    let rows = &run_experiment(&m).unwrap()[0].rows;
    let steps: Vec<u64> = rows.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![300, 600, 900, 1000]);
}

#[test]
fn empty_series_still_has_header() {
    let bytes = csv_bytes(&[]);
    assert_eq!(String::from_utf8(bytes).unwrap(), format!("{CSV_HEADER}\n"));
    let svg = render_svg(2, 8, &[(LossKind::TrajectoryBalance, Vec::new())]);
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
}

#[test]
fn failed_cell_exits_1_and_keeps_last_good() {
    let dir = tempfile::tempdir().unwrap();
    // a step this large overflows the logits on the first update
    let status = bin()
        .args(["--dim", "2", "--horizon", "3", "--loss", "tb", "--steps", "50", "--lr", "1e308"])
        .args(["--lr-logz", "1e308", "--out"])
        .arg(dir.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
    let ckpt = dir.path().join("cells/d2_h3_tb_s0.last_good.ckpt");
    let env = Hypergrid::new(2, 3, 0.1).unwrap();
    let params = subgfn::checkpoint::load(&env, fs::read(ckpt).unwrap().as_slice()).unwrap();
    params.check_finite().unwrap();
}

#[test]
fn unwritable_output_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let status = bin()
        .args(["--dim", "2", "--horizon", "2", "--loss", "tb", "--steps", "5", "--out"])
        .arg(&blocker)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn saved_checkpoints_reload() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let m = parse(&["--dim", "2", "--horizon", "3", "--loss", "subgfn", "--steps", "40", "--save-checkpoints", "--out", out])
        .unwrap();
    let outcomes = run_experiment(&m).unwrap();
    write_outputs(&m, &outcomes).unwrap();
    let env = m.env(2, 3).unwrap();
    let bytes = fs::read(dir.path().join("cells/d2_h3_subgfn_s0.ckpt")).unwrap();
    let loaded = subgfn::checkpoint::load(&env, bytes.as_slice()).unwrap();
    assert_eq!(Some(loaded), outcomes[0].params);
}
