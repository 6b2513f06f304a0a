use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(celltopic::cli::run(std::env::args_os()))
}
