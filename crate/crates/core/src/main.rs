fn main() {
    std::process::exit(gcn_cert::cli::run_command(std::env::args_os()));
}
