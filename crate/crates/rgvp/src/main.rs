use clap::Parser;

fn main() {
    let cli = match rgvp::cli::Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    rgvp::cli::init_logging();
    if let Err(e) = rgvp::cli::run(cli) {
        eprintln!("error[{}]: {e}", e.class());
        std::process::exit(1);
    }
}
