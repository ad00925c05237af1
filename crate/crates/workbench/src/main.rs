fn main() -> std::process::ExitCode {
    fissura_workbench::cli::main()
}
