use clap::Parser;

fn main() {
    let cli = vnmt::cli::Cli::parse();
    if let Err(e) = vnmt::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
