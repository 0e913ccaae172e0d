fn main() {
    let result = viewgen::cli::run_from(std::env::args());
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    std::process::exit(viewgen::cli::exit_code(&result));
}
