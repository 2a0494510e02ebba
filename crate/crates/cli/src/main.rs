use clap::Parser;

fn main() {
    let cli = hmc_tune_cli::Cli::parse();
    if let Err(e) = hmc_tune_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
