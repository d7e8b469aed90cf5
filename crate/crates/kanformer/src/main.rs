use std::process::ExitCode;

fn main() -> ExitCode {
    kanformer::cli::main()
}
