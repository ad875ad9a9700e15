fn main() -> std::process::ExitCode {
    causalnl_std::cli::main()
}
