use clap::Parser;
use ttslab_cli::{execute, exit_code, Cli};

fn main() {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
