fn main() {
    std::process::exit(ggpm_cli::run(std::env::args_os()));
}
