use clap::Parser;

fn main() {
    let cli = sbam::cli::Cli::parse();
    if let Err(e) = sbam::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
