use clap::Parser;

fn main() {
    let cli = hyperdid::cli::Cli::parse();
    if let Err(e) = hyperdid::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
