use std::process::ExitCode;

fn main() -> ExitCode {
    modfuse::cli::main_with_args(std::env::args_os())
}
