use std::io::Write;
use std::process::ExitCode;

use clap::Parser;

use luv_cli::commands::{run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            let text = if cli.json { serde_json::to_string_pretty(&out.json).expect("report serializes") } else { out.text };
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("luv: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
