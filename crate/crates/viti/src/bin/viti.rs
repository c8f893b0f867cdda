use clap::Parser;

fn main() {
    let cli = viti::cli::Cli::parse();
    if let Err(err) = viti::cli::run(cli) {
        eprintln!("error: {err}");
        std::process::exit(viti::cli::exit_code(&err));
    }
}
