use clap::Parser;

fn main() {
    let cli = immrm_cli::Cli::parse();
    std::process::exit(immrm_cli::run(&cli));
}
