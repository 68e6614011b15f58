fn main() -> std::process::ExitCode {
    hybrid_reason::cli::main()
}
