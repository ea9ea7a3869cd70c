use clap::Parser;

fn main() {
    let cli = metarec::cli::Cli::parse();
    if let Err(e) = metarec::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
