fn main() -> std::process::ExitCode {
    srdiff::cli::main()
}
