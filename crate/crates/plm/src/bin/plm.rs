use std::process::ExitCode;

fn main() -> ExitCode {
    plm::cli::run()
}
