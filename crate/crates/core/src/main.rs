use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(regioncast::evalcli::cli(std::env::args_os()) as u8)
}
