fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(flextrain::cli::run_cli(&args));
}
