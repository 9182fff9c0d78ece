//! Runs the finite-difference checks for one module (default `adsa`).

use dualkanba::checks;

fn main() -> dualkanba::Result<()> {
    let module = std::env::args().nth(1).unwrap_or_else(|| "adsa".into());
    let Some(selected) = checks::select(&module) else {
        eprintln!("module must be one of {}", checks::MODULES.join(", "));
        std::process::exit(2);
    };
    for c in selected {
        let (eps, tol) = c.kind.defaults();
        let r = c.run(eps)?;
        let verdict = if r.max_rel_error <= tol { "PASS" } else { "FAIL" };
        println!("{verdict} {:<24} {:.2e} ({} entries)", c.name, r.max_rel_error, r.entries_checked);
    }
    Ok(())
}
