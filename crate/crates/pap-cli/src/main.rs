use clap::Parser;

fn main() {
    let cli = pap_cli::args::Cli::parse();
    if let Err(err) = pap_cli::dispatch(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(pap_cli::exit_code_for(&err));
    }
}
