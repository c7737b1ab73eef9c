fn main() -> std::process::ExitCode {
    reset_ridge::cli::main()
}
