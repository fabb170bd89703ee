fn main() -> std::process::ExitCode {
    flowbench::cli::main_entry()
}
