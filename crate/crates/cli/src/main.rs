fn main() -> std::process::ExitCode {
    lmtrack_cli::main_with_args(std::env::args_os())
}
