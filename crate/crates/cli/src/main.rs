fn main() {
    std::process::exit(fedskip_cli::run_cli(std::env::args_os()));
}
