//! Step-by-step replacement on one head with a small device budget.

use kvtier::config::{Granularity, HeadKey, ModelShape, RetrievalBudget, SparseConfig, TierParams};
use kvtier::metadata::{MetadataConfig, MetadataStore};
use kvtier::partition::PartitionSpec;
use kvtier::replacement::{EvictionRecord, ReplacementParams};
use kvtier::RequestId;

fn main() -> kvtier::Result<()> {
    let model = ModelShape {
        num_layers: 1,
        num_kv_heads: 1,
        head_dim: 64,
        bytes_per_element: 2,
        max_context: 1024,
    };
    let sparse = SparseConfig {
        retrieval_budget: RetrievalBudget::Tokens(24),
        partition_granularity: Granularity::Fixed(8),
        page_size: 8,
        summary_ratio: 0.125,
        update_interval: 64,
    };
    let tiers = TierParams {
        device_capacity: 1 << 20,
        host_capacity: 1 << 24,
        bw_hbm: 1e12,
        bw_pcie: 1e10,
        t_mlp: 0.0,
        per_transfer_latency: 0.0,
    };
    let params = ReplacementParams { n_buckets: 8, ..Default::default() };
    let mut store = MetadataStore::new(&model, &sparse, &tiers, &MetadataConfig::default(), params.n_buckets);

    let key = HeadKey { request: RequestId(0), layer: 0, head: 0 };
    store.register_partitions(key, &PartitionSpec::uniform(0, 128, 8))?;
    store.grow_device(&key, 4)?;

    let steps: [&[u32]; 6] = [&[0, 1, 2], &[1, 2, 3], &[4, 1], &[5, 6, 7], &[1, 5], &[0, 2]];
    let mut out = std::io::stdout().lock();
    for (step, sel) in steps.iter().enumerate() {
        let outcome = store.replace(&key, sel, step as u64, &params)?;
        EvictionRecord::new(step as u64, key, &outcome).write_line(&mut out)?;
    }
    Ok(())
}
