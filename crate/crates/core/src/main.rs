fn main() -> std::process::ExitCode {
    polydmc::cli::main()
}
