use clap::Parser;

fn main() {
    let cli = cmrse_cli::Cli::parse();
    std::process::exit(cmrse_cli::run(&cli));
}
