//! Miss-ratio curves of exact LRU, Belady and the bucketed policy on a
//! synthetic locality trace.

use kvtier::oracle::{belady, bucketed_lru, lru_reference};
use kvtier::replacement::ReplacementParams;
use kvtier::workload::{generate_access_trace, LocalityModel};

fn main() -> kvtier::Result<()> {
    let model = LocalityModel { reuse_fraction: 0.75, zipf_s: 0.9, budget: 32, seed: 7 };
    let base = generate_access_trace(&model, 1024, 2000, 32)?;
    let params = ReplacementParams::default();

    println!("{:>8} {:>8} {:>8} {:>8}", "pages", "lru", "belady", "bucketed");
    for capacity in [32, 48, 64, 96, 128, 192, 256, 512] {
        let t = base.with_capacity(capacity)?;
        println!(
            "{capacity:>8} {:>8.4} {:>8.4} {:>8.4}",
            lru_reference(&t).miss_ratio(&t),
            belady(&t, capacity)?.miss_ratio(&t),
            bucketed_lru(&t, &params)?.miss_ratio(&t),
        );
    }
    Ok(())
}
