use clap::Parser;

fn main() {
    let cli = plid_core::cli::Cli::parse();
    std::process::exit(plid_core::cli::run(cli));
}
