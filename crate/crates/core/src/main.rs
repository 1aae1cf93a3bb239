fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(cytoset::cli::run(&argv));
}
