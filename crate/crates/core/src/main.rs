fn main() -> std::process::ExitCode {
    fouriernat::cli::main()
}
