use std::process::ExitCode;

fn main() -> ExitCode {
    arfdx::cli::main_with_args(std::env::args_os())
}
