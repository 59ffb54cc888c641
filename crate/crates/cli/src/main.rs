fn main() {
    std::process::exit(asd_cli::run(std::env::args_os()));
}
