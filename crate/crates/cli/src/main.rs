fn main() {
    std::process::exit(stlf_cli::run(std::env::args_os()));
}
