//! End-to-end serving of a Poisson workload under each cache policy.
//!
//! ```text
//! cargo run --release --example serve_simulation [config.json]
//! ```

use std::path::PathBuf;

use kvtier::sim::{run_sim, CachePolicy, SimConfig};

fn main() -> kvtier::Result<()> {
    let path = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/batch_size.json")
    });
    let mut config = SimConfig::load(&path)?;
    let arrivals = config.arrivals(path.parent())?;

    println!(
        "{:<15} {:>10} {:>9} {:>9} {:>9} {:>7} {:>5}",
        "policy", "tok/s", "tpot ms", "ttft ms", "batch", "hit", "pre"
    );
    for policy in CachePolicy::ALL {
        config.cache_policy = policy;
        let r = run_sim(&config, &arrivals, None, |_| Ok(()))?;
        println!(
            "{:<15} {:>10.0} {:>9.3} {:>9.3} {:>9.2} {:>7.3} {:>5}",
            policy.name(),
            r.throughput_tokens_per_s,
            r.mean_tpot_s * 1e3,
            r.mean_ttft_proxy_s * 1e3,
            r.mean_batch_size,
            r.hit_ratio,
            r.preemptions
        );
    }
    Ok(())
}
