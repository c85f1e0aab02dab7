fn main() -> std::process::ExitCode {
    medirelay_service::cli::main()
}
