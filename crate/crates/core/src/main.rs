fn main() { std::process::exit(bodyfit::cli::run(std::env::args().collect())); }
