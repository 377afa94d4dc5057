//! One line per acceptance criterion. Criteria needing GPT-2 small weights
//! report SKIPPED unless `CIRCUIT_PROBE_MODEL` or `CIRCUIT_PROBE_CACHE`
//! points at them.

use circuit_probe::verify::{self, Status, VerifyOptions};

fn main() {
    let mut opts = VerifyOptions::from_env();
    opts.closed_form = std::env::var_os("CIRCUIT_PROBE_CLOSED_FORM").is_some();
    let results = verify::run(&opts);
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| r.status == Status::Fail).count();
    println!(
        "acceptance: {} criteria, {failed} failed, {} skipped",
        results.len(),
        results
            .iter()
            .filter(|r| r.status == Status::Skipped)
            .count()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
