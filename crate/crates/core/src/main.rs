use clap::Parser;

use layerbudget::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let message = e.to_string().replace('\n', " ");
        eprintln!("error[{}]: {message}", e.code());
        std::process::exit(1);
    }
}
