use clap::Parser;

fn main() {
    let cli = hmamba_cli::Cli::parse();
    std::process::exit(hmamba_cli::run(cli));
}
