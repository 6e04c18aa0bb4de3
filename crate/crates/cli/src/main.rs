fn main() {
    std::process::exit(mafbench_cli::parse_and_dispatch(std::env::args_os()));
}
