use clap::Parser;
use sparse_dominator::cli::{exit_code, run, Args, Outcome};

fn main() {
    let args = Args::parse();
    let result = run(&args);
    match &result {
        Ok(Outcome::Pass) => {}
        Ok(Outcome::Fail(msg)) => eprintln!("verification failed: {msg}"),
        Err(e) => eprintln!("error: {e}"),
    }
    std::process::exit(exit_code(&result));
}
