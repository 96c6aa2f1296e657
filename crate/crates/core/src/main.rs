fn main() -> std::process::ExitCode {
    sadda::cli::main()
}
