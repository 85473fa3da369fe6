use clap::Parser;

fn main() {
    let cli = cadm::cli::Cli::parse();
    if let Err(e) = cadm::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
