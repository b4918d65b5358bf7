fn main() {
    std::process::exit(capanneal_cli::run(std::env::args_os()));
}
