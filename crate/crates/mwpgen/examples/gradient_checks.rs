//! The built-in finite-difference suite: every tape primitive plus the
//! composed training objectives, printed as the same table the
//! `mwpgen gradcheck` command shows.
//!
//!     cargo run --release --example gradient_checks

use mwpgen::diagnostics::{gradient_suite, SUITE_TOLERANCE};

fn main() {
    let entries = gradient_suite(0);
    println!("{:<28} {:>8} {:>12}  result", "check", "coords", "max_rel_err");
    let mut coords = 0;
    let mut failures = 0;
    for entry in &entries {
        coords += entry.report.checked;
        if !entry.passes() {
            failures += 1;
        }
        println!(
            "{:<28} {:>8} {:>12.3e}  {}",
            entry.name,
            entry.report.checked,
            entry.report.max_rel_err,
            if entry.passes() { "pass" } else { "FAIL" }
        );
    }
    println!(
        "\n{} checks, {coords} coordinates, tolerance {SUITE_TOLERANCE:e}: {}",
        entries.len(),
        if failures == 0 { "all pass" } else { "FAILURES" }
    );
    std::process::exit(if failures == 0 { 0 } else { 1 });
}
