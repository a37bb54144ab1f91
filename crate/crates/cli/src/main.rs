use std::process::ExitCode;

fn main() -> ExitCode {
    rvernet_lab::main_with(std::env::args_os())
}
