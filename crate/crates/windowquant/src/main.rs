use clap::Parser;

fn main() {
    let cli = windowquant::cli::Cli::parse();
    std::process::exit(windowquant::cli::execute(cli));
}
