use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(xprompt::cli::main_result().exit_code)
}
