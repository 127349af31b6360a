use clap::Parser;

fn main() {
    let cli = ctseg_cli::Cli::parse();
    if let Err(e) = ctseg_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
