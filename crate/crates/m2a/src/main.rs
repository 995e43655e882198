use clap::Parser;

fn main() {
    let cli = m2a::cli::Cli::parse();
    if let Err(e) = m2a::cli::run(cli) {
        eprintln!("{}", e.to_json_line());
        std::process::exit(1);
    }
}
