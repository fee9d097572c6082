fn main() {
    std::process::exit(marl_credit_cli::run(std::env::args_os()));
}
