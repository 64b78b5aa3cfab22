use clap::Parser;

fn main() {
    let cli = causalseg_cli::Cli::parse();
    if let Err(e) = causalseg_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
