//! Step-to-step overlap of generated selections, written to and read back
//! from the trace format.

use kvtier::workload::{generate_trace, mean_overlap, LocalityModel, TraceFile};

fn main() -> kvtier::Result<()> {
    for reuse in [0.0, 0.5, 0.8, 0.95] {
        let model = LocalityModel { reuse_fraction: reuse, zipf_s: 1.0, budget: 64, seed: 3 };
        let sel = generate_trace(&model, 2048, 400)?;
        println!("reuse_fraction {reuse:.2}: mean overlap {:.3}", mean_overlap(&sel));
    }

    let model = LocalityModel { reuse_fraction: 0.8, zipf_s: 1.0, budget: 16, seed: 3 };
    let sel = generate_trace(&model, 512, 50)?;
    let path = std::env::temp_dir().join("kvtier-locality.trace");
    TraceFile::single_head(512, 16, &sel).write_file(&path)?;
    let back = TraceFile::read_file(&path)?;
    assert_eq!(back.project(0, 0), sel);
    println!("round-tripped {} records through {}", back.records.len(), path.display());
    std::fs::remove_file(path)?;
    Ok(())
}
