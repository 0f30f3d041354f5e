use std::process::ExitCode;

use clap::Parser;
use dro_pref::cli::{self, Cli, ErrorReport};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let report = ErrorReport {
                error: "usage".into(),
                message: e.to_string().trim_end().to_string(),
                exit_code: 2,
            };
            eprintln!("{}", serde_json::to_string(&report).expect("error report serializes"));
            return ExitCode::from(2);
        }
    };
    match cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = ErrorReport::from_error(&e);
            eprintln!("{}", serde_json::to_string(&report).expect("error report serializes"));
            ExitCode::from(report.exit_code as u8)
        }
    }
}
