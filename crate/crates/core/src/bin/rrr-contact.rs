use clap::Parser;
use rrr_contact::cli::{self, Cli};

fn main() {
    let args = Cli::parse();
    match cli::run(&args) {
        Ok(text) => print!("{}", text.trim_end_matches('\n').to_owned() + "\n"),
        Err(e) => {
            eprintln!("{}", cli::error_line(&e));
            std::process::exit(1);
        }
    }
}
