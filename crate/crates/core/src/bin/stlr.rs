use clap::Parser;

fn main() {
    let cli = stlr::cli::Cli::parse();
    if let Err(e) = stlr::cli::execute(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
