fn main() {
    std::process::exit(cwflow::cli::run(std::env::args_os()));
}
