use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(msf_cli::run(std::env::args_os()))
}
