fn main() {
    std::process::exit(rac_cli::run(std::env::args_os()));
}
