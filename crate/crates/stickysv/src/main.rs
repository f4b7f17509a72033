use clap::Parser;

fn main() {
    let cli = stickysv::cli::Cli::parse();
    if let Err(e) = stickysv::cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
