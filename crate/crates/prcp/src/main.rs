use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(prcp::cli::run())
}
