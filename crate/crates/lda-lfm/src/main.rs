use clap::Parser;
use lda_lfm::cli::{run, Cli};

fn main() {
    // Log level comes from LDA_LFM_LOG only; everything else is flags.
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LDA_LFM_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
