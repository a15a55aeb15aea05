//! Acceptance criteria 1 to 11 at their pinned tolerances.
//!
//! Runs without the libtest harness so every criterion prints exactly one
//! PASS or FAIL line; the process fails if any criterion does.

use std::path::PathBuf;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use kvtier::envelope::{kv_bytes, tpot, EnvelopeParams};
use kvtier::metadata::{Table, Tier};
use kvtier::oracle::{belady, bucketed_lru, exhaustive_min, lru_reference, AccessTrace};
use kvtier::replacement::{EvictionMode, ReplacementParams};
use kvtier::scheduler::{proportional_split, Admission, GrantMode, Scheduler, SchedulerConfig};
use kvtier::sim::{compare, footprint_scenario, generate_trace_file, trace_run, CachePolicy, ComparePoint, SimConfig};
use kvtier::workload::{generate_access_trace, LocalityModel};
use kvtier::{ModelShape, RequestId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> SimConfig {
    SimConfig::load(&configs().join(name)).expect("config loads")
}

fn qwen3() -> ModelShape {
    ModelShape {
        num_layers: 36,
        num_kv_heads: 8,
        head_dim: 128,
        bytes_per_element: 2,
        max_context: 131_072,
    }
}

fn kv_size_anchor() -> Verdict {
    let t = Instant::now();
    let bytes = kv_bytes(&qwen3(), 131_072, 1);
    let gb = bytes as f64 / 1e9;
    let slice = bytes as f64 * 0.05;
    let took = t.elapsed();
    verdict(
        (19.0..=19.5).contains(&gb) && slice < 1e9 && took < Duration::from_secs(1),
        format!("{bytes} B = {gb:.3} GB, 5% slice {:.3} GB", slice / 1e9),
    )
}

fn tpot_decomposition() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bad = 0;
    for _ in 0..100 {
        let p = EnvelopeParams {
            alpha: rng.random(),
            beta: rng.random(),
            rho: rng.random(),
            bw_hbm: rng.random_range(1e11..1e13),
            bw_pcie: rng.random_range(1e9..1e11),
            t_mlp: rng.random_range(0.0..0.05),
            ..EnvelopeParams::from_shape(
                &qwen3(),
                rng.random_range(1..=131_072),
                rng.random_range(1..=64),
            )
        };
        let t = tpot(&p);
        if t.total_s != t.hbm_s + t.pcie_s + t.mlp_s {
            bad += 1;
        }
    }
    let zero = EnvelopeParams {
        alpha: 0.0,
        beta: 0.0,
        rho: 0.0,
        bw_hbm: 2e12,
        bw_pcie: 32e9,
        t_mlp: 0.0123,
        ..EnvelopeParams::from_shape(&qwen3(), 32_768, 4)
    };
    let degenerate = tpot(&zero).total_s == zero.t_mlp;
    verdict(
        bad == 0 && degenerate,
        format!("{bad} of 100 sums inexact, degenerate case exact: {degenerate}"),
    )
}

/// Random instance with capacity ≤ 4 pages and at most 12 accesses.
fn tiny_instance(rng: &mut ChaCha8Rng) -> (AccessTrace, u64) {
    let capacity = rng.random_range(1..=4u64);
    let parts = rng.random_range(1..=7u32);
    let mut steps = Vec::new();
    let mut accesses = 0;
    while accesses < 12 {
        let want = rng.random_range(1..=capacity.min(parts as u64)) as usize;
        let want = want.min(12 - accesses);
        let mut step: Vec<u32> = Vec::new();
        while step.len() < want {
            let id = rng.random_range(0..parts);
            if !step.contains(&id) {
                step.push(id);
            }
        }
        accesses += step.len();
        steps.push(step);
        if rng.random_bool(0.15) {
            break;
        }
    }
    let trace = AccessTrace::single_page(steps, capacity).expect("valid instance");
    (trace, capacity)
}

fn oracle_optimality() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    let n = 1000;
    for _ in 0..n {
        let (trace, cap) = tiny_instance(&mut rng);
        let b = belady(&trace, cap).unwrap().miss_pages;
        let e = exhaustive_min(&trace, cap).unwrap();
        if b != e {
            mismatches += 1;
        }
    }
    let took = t.elapsed();
    verdict(
        mismatches == 0 && took < Duration::from_secs(60),
        format!("{mismatches} mismatches over {n} instances in {:.2} s", took.as_secs_f64()),
    )
}

fn random_trace(rng: &mut ChaCha8Rng, seed: u64, steps: usize, capacity: u64) -> AccessTrace {
    let budget = rng.random_range(1..=capacity.min(64)) as usize;
    let model = LocalityModel {
        reuse_fraction: rng.random_range(0.0..=1.0),
        zipf_s: rng.random_range(0.0..1.2),
        budget,
        seed,
    };
    generate_access_trace(&model, 1024, steps, capacity).unwrap()
}

fn bucket_exact() -> ReplacementParams {
    ReplacementParams {
        n_buckets: 64,
        eviction_mode: EvictionMode::BucketExact,
    }
}

fn dominance_chain() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut v_opt, mut v_lru) = (0, 0);
    let n = 200;
    for seed in 0..n {
        let capacity = rng.random_range(8..=256u64);
        let trace = random_trace(&mut rng, seed, 500, capacity);
        let b = belady(&trace, capacity).unwrap().misses;
        let l = lru_reference(&trace).misses;
        let k = bucketed_lru(&trace, &bucket_exact()).unwrap().misses;
        v_opt += usize::from(b > l);
        v_lru += usize::from(l > k);
    }
    verdict(
        v_opt == 0 && v_lru == 0,
        format!("{n} traces: belady>lru {v_opt}, lru>bucketed {v_lru}"),
    )
}

fn bucketed_fidelity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = bucket_exact();
    let n_buckets = params.n_buckets as usize;
    let mut unequal = 0;
    for seed in 0..200 {
        let capacity = rng.random_range(8..=256u64);
        let len = rng.random_range(1..=n_buckets);
        let trace = random_trace(&mut rng, seed, len, capacity);
        let l = lru_reference(&trace).misses;
        let k = bucketed_lru(&trace, &params).unwrap().misses;
        unequal += usize::from(l != k);
    }
    let mut worst: f64 = 0.0;
    for seed in 200..400 {
        let capacity = rng.random_range(8..=256u64);
        let trace = random_trace(&mut rng, seed, 4 * n_buckets, capacity);
        let l = lru_reference(&trace).misses;
        let k = bucketed_lru(&trace, &params).unwrap().misses;
        if l > 0 {
            worst = worst.max((k as f64 - l as f64) / l as f64);
        }
    }
    verdict(
        unequal == 0 && worst <= 0.10,
        format!("short traces unequal {unequal}/200, worst long-trace excess {:.2}%", worst * 100.0),
    )
}

struct Sweep {
    points: Vec<ComparePoint>,
    elapsed: Duration,
}

fn sweep() -> &'static Sweep {
    static SWEEP: OnceLock<Sweep> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let t = Instant::now();
        let config = load("locality_sweep.json");
        let c = &config.compare;
        let trace = generate_trace_file(&config, c.context, c.steps).unwrap();
        let points = compare(&config, &trace, c.context, &c.ratios).unwrap();
        Sweep {
            points,
            elapsed: t.elapsed(),
        }
    })
}

fn hit_ratio_saturation() -> Verdict {
    let s = sweep();
    let at = |r: f64| {
        s.points
            .iter()
            .find(|p| p.ratio == r)
            .expect("ratio in sweep")
            .hit_ratio
    };
    let early = at(4.0) - at(1.0);
    let late = at(8.0) - at(4.0);
    let hits: Vec<String> = s
        .points
        .iter()
        .map(|p| format!("{}x={:.3}", p.ratio, p.hit_ratio))
        .collect();
    verdict(
        late <= 0.2 * early && s.elapsed < Duration::from_secs(120),
        format!(
            "gain 4x->8x {late:.4} vs 1x->4x {early:.4} (ratio {:.2}, limit 0.20); {}; {:.1} s",
            late / early,
            hits.join(" "),
            s.elapsed.as_secs_f64()
        ),
    )
}

fn buffering_benefit() -> Verdict {
    let config = load("locality_sweep.json");
    let c = &config.compare;
    let trace = generate_trace_file(&config, c.context, c.steps).unwrap();
    let ratio = config.scheduler.min_buffer_ratio;
    let tput = |policy| {
        trace_run(&config, &trace, c.context, policy, ratio)
            .unwrap()
            .report
            .throughput_tokens_per_s
    };
    let buffered = tput(CachePolicy::Buffered);
    let mandatory = tput(CachePolicy::MandatoryOnly);
    let base = tput(CachePolicy::NoCache);
    let over_mandatory = buffered / mandatory;
    let over_base = buffered / base;
    verdict(
        over_mandatory >= 1.25 && over_base >= 1.5,
        format!("buffered/mandatory {over_mandatory:.3} (>= 1.25), buffered/base {over_base:.3} (>= 1.50)"),
    )
}

fn metadata_reduction() -> Verdict {
    let t = Instant::now();
    let mut config = load("metadata_llama70b.json");
    // One request against a one-request flat layout has the same ratios
    // as a full batch against the full flat layout.
    config.metadata.max_batch = 1;
    let fp = footprint_scenario(&config, config.footprint.context, 1).unwrap();
    let flat_device = fp.logical_bytes(Tier::Device);
    let two_level_device = fp.two_level_tier_bytes(Tier::Device);
    let two_level_all = fp.two_level_bytes();
    let a = flat_device as f64 / two_level_device as f64;
    let b = two_level_all as f64 / two_level_device as f64;
    let dpt = fp.table(Table::DevicePageTable);
    let dpt_ratio = dpt.logical_bytes as f64 / (dpt.physical_bytes + dpt.directory_bytes) as f64;
    let host_off = fp.table(Table::PartitionOffset).tier == Tier::Host
        && fp.table(Table::HostPageArray).tier == Tier::Host;
    let took = t.elapsed();
    verdict(
        a >= 10.0 && b >= 3.0 && host_off && took < Duration::from_secs(60),
        format!(
            "(a) flat device {flat_device} B / two-level device {two_level_device} B = {a:.2}x (>= 10); \
             (b) all tables {two_level_all} B / device tier {two_level_device} B = {b:.2}x (>= 3); \
             page table alone {dpt_ratio:.2}x; {:.1} s",
            took.as_secs_f64()
        ),
    )
}

fn scheduler_math() -> Verdict {
    let mut ok = true;
    let mut s = Scheduler::new(SchedulerConfig::new(384), GrantMode::Elastic).unwrap();
    ok &= s.requirement(64) == 64 * 6;
    ok &= matches!(s.try_admit(RequestId(0), 64, 32_768), Admission::Admitted { .. });
    let mut short = Scheduler::new(SchedulerConfig::new(383), GrantMode::Elastic).unwrap();
    ok &= matches!(short.try_admit(RequestId(0), 64, 32_768), Admission::Queued { .. });
    let two = proportional_split(40, &[(RequestId(0), 32_768, 1000), (RequestId(1), 98_304, 1000)]);
    let three = proportional_split(
        7,
        &[(RequestId(0), 1, 100), (RequestId(1), 1, 100), (RequestId(2), 2, 100)],
    );
    ok &= two == vec![(RequestId(0), 10), (RequestId(1), 30)];
    ok &= three == vec![(RequestId(0), 2), (RequestId(1), 2), (RequestId(2), 3)];
    verdict(
        ok,
        format!("threshold 64*(1+5)=384, split 40 -> {:?}, split 7 -> {:?}",
            two.iter().map(|x| x.1).collect::<Vec<_>>(),
            three.iter().map(|x| x.1).collect::<Vec<_>>()),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_kvtier"))
            .arg("run")
            .arg("--config")
            .arg(configs().join("quickstart.json"))
            .args(["--seed", "99", "--out"])
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(out).unwrap()
    };
    let a = run("a.json");
    let b = run("b.json");
    verdict(a == b && !a.is_empty(), format!("{} bytes, identical: {}", a.len(), a == b))
}

fn envelope_dominance() -> Verdict {
    let s = sweep();
    let worst = s
        .points
        .iter()
        .map(|p| p.envelope_tpot_s / p.realized_tpot_s)
        .fold(0.0, f64::max);
    let ok = s.points.iter().all(|p| p.envelope_tpot_s <= p.realized_tpot_s);
    verdict(
        ok,
        format!("{} sweep points, max envelope/realized {worst:.3}", s.points.len()),
    )
}

type Criterion = (u8, &'static str, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 11] = [
        (1, "kv-size anchor", kv_size_anchor),
        (2, "tpot decomposition", tpot_decomposition),
        (3, "oracle optimality", oracle_optimality),
        (4, "dominance chain", dominance_chain),
        (5, "bucketed-lru fidelity", bucketed_fidelity),
        (6, "hit-ratio saturation", hit_ratio_saturation),
        (7, "buffering benefit", buffering_benefit),
        (8, "metadata reduction", metadata_reduction),
        (9, "scheduler math", scheduler_math),
        (10, "determinism", determinism),
        (11, "envelope dominance", envelope_dominance),
    ];
    let mut failed = Vec::new();
    for (id, name, check) in criteria {
        let v = check();
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {name}: {tag} ({})", v.detail);
        if !v.pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all 11 criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
