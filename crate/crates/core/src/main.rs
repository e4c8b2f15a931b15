fn main() -> std::process::ExitCode {
    anlab::cli::main()
}
