//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! `cargo test --release -p autoprosam --test acceptance`

mod support;

use std::time::Instant;

use support::Check;

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("C1 inheritance identity", support::inheritance_identity),
        ("C2 init identities", support::init_identities),
        ("C3 freezing", support::freezing),
        ("C4 gradient checks", support::gradient_checks),
        ("C5 metric oracles", support::metric_oracles),
        ("C6 sliding window", support::sliding_window),
        ("C7 ablation structure", support::ablation_structure),
        ("C8 desk convergence", support::desk_convergence),
        ("C9 recipe fidelity", support::recipe_fidelity),
        ("C10 determinism", support::determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
