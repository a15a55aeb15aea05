use std::path::PathBuf;

use kvtier::config::{Granularity, HeadKey, ModelShape, RetrievalBudget, SparseConfig, TierParams};
use kvtier::metadata::MetadataConfig;
use kvtier::pipeline::{IndexParams, Pipeline, RequestSpec, SelectorConfig};
use kvtier::replacement::ReplacementParams;
use kvtier::sim::{footprint_scenario, run_sim, CachePolicy, SimConfig, StepRecord};
use kvtier::RequestId;
use proptest::prelude::*;

fn load(name: &str) -> SimConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    SimConfig::load(&path).unwrap()
}

fn steps_of(config: &SimConfig) -> (kvtier::sim::RunReport, Vec<StepRecord>) {
    let arrivals = config.arrivals(None).unwrap();
    let mut steps = Vec::new();
    let report = run_sim(config, &arrivals, None, |s| {
        steps.push(s.clone());
        Ok(())
    })
    .unwrap();
    (report, steps)
}

#[test]
fn simulated_clock_advances_by_priced_steps() {
    let config = load("quickstart.json");
    let (report, steps) = steps_of(&config);
    let t = &config.tiers;
    let mut end = 0.0_f64;
    let mut token_time = 0.0;
    let mut tokens = 0;
    for s in &steps {
        let m = &s.metrics;
        let step = m.hbm_bytes / t.bw_hbm
            + m.transferred_bytes as f64 / t.bw_pcie
            + t.per_transfer_latency * m.plans_with_copies as f64
            + t.t_mlp;
        assert_eq!(step, m.step_time_s);
        assert!(s.start_s >= end);
        end = s.start_s + step;
        token_time += step * s.batch as f64;
        tokens += s.batch as u64;
    }
    assert_eq!(end, report.sim_seconds);
    assert_eq!(tokens, report.output_tokens);
    assert_eq!(token_time / tokens as f64, report.mean_tpot_s);
}

#[test]
fn hits_and_misses_cover_every_selection() {
    let (_, steps) = steps_of(&load("quickstart.json"));
    for s in &steps {
        for r in &s.metrics.requests {
            assert_eq!(r.hits + r.misses, r.selected_partitions);
        }
    }
}

#[test]
fn step_stream_is_deterministic() {
    let config = load("quickstart.json");
    let (_, a) = steps_of(&config);
    let (_, b) = steps_of(&config);
    assert_eq!(a, b);
    let mut other = config.clone();
    other.seed += 1;
    let (_, c) = steps_of(&other);
    assert_ne!(a, c);
}

#[test]
fn offloading_admits_larger_batches_than_device_only() {
    let mut config = load("batch_size.json");
    let (buffered, _) = steps_of(&config);
    config.cache_policy = CachePolicy::DeviceOnly;
    let (device, _) = steps_of(&config);
    assert_eq!(buffered.output_tokens, device.output_tokens);
    assert!(
        buffered.mean_batch_size >= device.mean_batch_size,
        "{} < {}",
        buffered.mean_batch_size,
        device.mean_batch_size
    );
    assert!(buffered.mean_ttft_proxy_s <= device.mean_ttft_proxy_s);
}

#[test]
fn larger_buffer_ratio_hits_more() {
    let mut config = load("quickstart.json");
    config.scheduler.min_buffer_ratio = 1.0;
    let (low, _) = steps_of(&config);
    config.scheduler.min_buffer_ratio = 5.0;
    let (high, _) = steps_of(&config);
    assert!(high.hit_ratio > low.hit_ratio, "{} vs {}", high.hit_ratio, low.hit_ratio);
}

#[test]
fn footprint_ratios_scale_with_batch() {
    let mut config = load("quickstart.json");
    config.metadata.max_batch = 1;
    let one = footprint_scenario(&config, 16_384, 1).unwrap();
    config.metadata.max_batch = 3;
    let three = footprint_scenario(&config, 16_384, 3).unwrap();
    assert_eq!(3 * one.flat_logical_bytes(), three.flat_logical_bytes());
    assert_eq!(3 * one.two_level_bytes(), three.two_level_bytes());
}

fn small_pipeline(update_interval: u64, granularity: Granularity) -> Pipeline {
    Pipeline::new(
        ModelShape {
            num_layers: 1,
            num_kv_heads: 2,
            head_dim: 64,
            bytes_per_element: 2,
            max_context: 8192,
        },
        SparseConfig {
            retrieval_budget: RetrievalBudget::Tokens(64),
            partition_granularity: granularity,
            page_size: 4,
            summary_ratio: 0.1,
            update_interval,
        },
        TierParams {
            device_capacity: 1 << 26,
            host_capacity: 1 << 30,
            bw_hbm: 1e12,
            bw_pcie: 1e10,
            t_mlp: 0.0,
            per_transfer_latency: 0.0,
        },
        MetadataConfig::default(),
        ReplacementParams::default(),
        IndexParams {
            outliers: 1,
            window: 2,
            variable_pattern: vec![5, 11, 3],
        },
        SelectorConfig::Synthetic {
            reuse_fraction: 0.5,
            zipf_s: 1.0,
        },
        None,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tokens_are_conserved(
        prompt in 64u64..1500,
        output in 1u64..300,
        interval in 1u64..80,
        variable in any::<bool>(),
    ) {
        let g = if variable { Granularity::Variable } else { Granularity::Fixed(8) };
        let mut p = small_pipeline(interval, g);
        let id = RequestId(0);
        p.offload(RequestSpec { id, prompt_tokens: prompt, output_tokens: output, selection_seed: 1 }).unwrap();
        p.set_capacity(id, 200, None).unwrap();
        for step in 0..output {
            p.decode_step(&[id], step).unwrap();
            p.append_tokens(id, 1).unwrap();
            for key in p.head_keys(id).unwrap() {
                let counts = p.page_counts(&key).unwrap();
                let n = counts.len() as u32;
                let tokens: u64 = p
                    .store()
                    .lookup_meta(&key, &(0..n).collect::<Vec<_>>())
                    .unwrap()
                    .iter()
                    .map(|i| i.token_count)
                    .sum();
                prop_assert_eq!(
                    tokens + p.residual_tokens(id).unwrap(),
                    prompt + step + 1
                );
            }
        }
        prop_assert!(p.is_finished(id).unwrap());
    }

    #[test]
    fn transfer_plans_match_admissions(seed in 0u64..1000, ids in prop::collection::vec(0u32..400, 1..40)) {
        let mut p = small_pipeline(64, Granularity::Fixed(8));
        let id = RequestId(seed);
        p.offload(RequestSpec { id, prompt_tokens: 3200, output_tokens: 10, selection_seed: seed }).unwrap();
        p.set_capacity(id, 200, None).unwrap();
        let key = HeadKey { request: id, layer: 0, head: 1 };
        let pinned = p.store().head(&key).unwrap().pinned_ids().to_vec();
        let ids: Vec<u32> = ids.into_iter().filter(|i| !pinned.contains(i)).collect();
        let (outcome, plan) = p.retrieve(&key, &ids, 0).unwrap();
        let admitted: Vec<u32> = outcome.admissions.iter().flat_map(|a| a.1.clone()).collect();
        let targets: Vec<u32> = plan.copies.iter().map(|c| c.1).collect();
        prop_assert_eq!(admitted, targets);
        prop_assert_eq!(plan.bytes, plan.copies.len() as u64 * 4 * 64 * 2 * 2);
        let mut sources: Vec<u32> = plan.copies.iter().map(|c| c.0).collect();
        sources.sort_unstable();
        sources.dedup();
        prop_assert_eq!(sources.len(), plan.copies.len());
    }
}
