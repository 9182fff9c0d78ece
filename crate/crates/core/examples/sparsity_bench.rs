//! Attended key/value counts against dense attention as the sequence grows.

use dualkanba::adsa::AdsaConfig;
use dualkanba::bench::{sparsity_sweep, write_csv};

fn main() -> dualkanba::Result<()> {
    let rows = sparsity_sweep(32, AdsaConfig::default(), &[64, 128, 256, 512, 1024], 0, 2)?;
    write_csv(&rows, std::io::stdout())?;
    for w in rows.windows(2) {
        println!(
            "{} -> {}: attended total x{:.2}, dense total x{:.2}",
            w[0].ts,
            w[1].ts,
            w[1].total_attended / w[0].total_attended,
            w[1].total_dense as f64 / w[0].total_dense as f64
        );
    }
    Ok(())
}
