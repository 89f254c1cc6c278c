use clap::Parser;

fn main() {
    let cli = vccgm_cli::Cli::parse();
    let result = vccgm_cli::configure_threads().and_then(|()| vccgm_cli::run(cli));
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(vccgm_cli::exit_code(&e));
    }
}
