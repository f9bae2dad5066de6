use clap::Parser;

use vcreg::cli::{error_json, exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            if !summary.message.is_empty() {
                println!("{}", summary.message);
            }
            println!("outputs written to {}", summary.out_dir.display());
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            std::process::exit(exit_code(&e));
        }
    }
}
