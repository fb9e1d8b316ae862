fn main() {
    std::process::exit(late_balance_cli::run_from_args(std::env::args_os()));
}
