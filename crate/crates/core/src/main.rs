use clap::Parser;

fn main() {
    let cli = edgeseg::cli::Cli::parse();
    std::process::exit(edgeseg::cli::run(cli));
}
