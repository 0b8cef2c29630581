use std::process::ExitCode;

use subgfn_cli::{parse_config, run_experiment, write_outputs, CliError};

fn run() -> Result<bool, CliError> {
    let matrix = parse_config(std::env::args_os())?;
    let cells = matrix.cells().len();
    eprintln!("running {cells} cell(s), writing to {}", matrix.out.display());
    let outcomes = run_experiment(&matrix)?;
    write_outputs(&matrix, &outcomes)?;
    let failed = outcomes.iter().filter(|o| o.failed()).count();
    if failed > 0 {
        eprintln!("{failed} of {cells} cell(s) failed");
    }
    Ok(failed == 0)
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            match &e {
                CliError::Usage(usage) => {
                    let _ = usage.print();
                }
                other => eprintln!("error: {other}"),
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
