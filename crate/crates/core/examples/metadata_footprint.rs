//! Flat versus two-level metadata footprint for one long-context request.
//!
//! ```text
//! cargo run --release --example metadata_footprint [context]
//! ```

use std::path::Path;

use kvtier::metadata::Tier;
use kvtier::sim::{footprint_scenario, SimConfig};

fn main() -> kvtier::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/metadata_llama70b.json");
    let mut config = SimConfig::load(&path)?;
    config.metadata.max_batch = 1;
    let context = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(32_768);

    let fp = footprint_scenario(&config, context, 1)?;
    print!("{}", fp.to_csv_string());

    let mib = |b: u64| b as f64 / (1u64 << 20) as f64;
    let flat_dev = fp.logical_bytes(Tier::Device);
    let two_dev = fp.two_level_tier_bytes(Tier::Device);
    println!();
    println!("device tier   flat {:>9.1} MiB   two-level {:>9.1} MiB", mib(flat_dev), mib(two_dev));
    println!("all tables    flat {:>9.1} MiB   two-level {:>9.1} MiB", mib(fp.flat_logical_bytes()), mib(fp.two_level_bytes()));
    println!("flat device / two-level device = {:.2}", flat_dev as f64 / two_dev as f64);
    Ok(())
}
