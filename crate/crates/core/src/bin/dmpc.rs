fn main() -> std::process::ExitCode {
    dmpc::cli::main()
}
