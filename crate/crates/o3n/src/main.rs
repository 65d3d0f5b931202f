use clap::Parser;
use o3n::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if cli.deterministic {
        // Results are bitwise identical at any thread count; pinning to one
        // thread makes the execution order itself reproducible too.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    if let Err(err) = run(&cli) {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}
