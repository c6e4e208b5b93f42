//! Run a bundled scenario through the library API and print its summary.
//! Usage: cargo run --example scenario_runner -- [name] [seed]

use hemsim::scenario::{bundled, run};

fn main() {
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "licensing_basic".to_string());
    let config = match bundled(&name) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(2);
        }
    };
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(config.seed);
    let report = run(&config, seed).expect("scenario runs");
    print!("{}", report.files["summary.txt"]);
    std::process::exit(if report.passed() { 0 } else { 1 });
}
