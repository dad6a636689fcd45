fn main() -> std::process::ExitCode {
    conceptcap::cli::main()
}
