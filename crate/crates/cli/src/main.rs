use clap::Parser;

fn main() {
    let cli = dcap_cli::Cli::parse();
    if let Err(error) = dcap_cli::run(cli) {
        eprintln!("error: {error}");
        std::process::exit(error.exit_code());
    }
}
