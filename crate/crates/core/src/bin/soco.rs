use std::process::ExitCode;

fn main() -> ExitCode {
    soco::cli::main_with_args(std::env::args_os())
}
