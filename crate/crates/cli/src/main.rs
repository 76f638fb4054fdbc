fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(svbrdf_cli::run(&args));
}
