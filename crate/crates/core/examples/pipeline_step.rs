//! Offload one request and drive its decode steps through the pipeline.

use std::path::Path;

use kvtier::pipeline::{Pipeline, RequestSpec};
use kvtier::sim::SimConfig;
use kvtier::RequestId;

fn main() -> kvtier::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quickstart.json");
    let c = SimConfig::load(&path)?;
    let mut p = Pipeline::new(
        c.model,
        c.sparse,
        c.tiers,
        c.metadata,
        c.replacement,
        c.index.clone(),
        c.selector,
        None,
    )?;

    let id = RequestId(0);
    let placed = p.offload(RequestSpec { id, prompt_tokens: 8192, output_tokens: 6, selection_seed: 1 })?;
    println!("{placed:?}");

    let sels = p.select_request(id)?;
    let mandatory = p.mandatory_pages(id, &sels)?;
    println!("mandatory pages per head {mandatory}, pinned {}", p.pinned_pages(id)?);
    p.set_capacity(id, mandatory * 3, None)?;

    for step in 0..6 {
        let m = p.decode_step(&[id], step)?;
        println!(
            "step {step}: hits {:>3} misses {:>3} moved {:>7} B  {:.1} us",
            m.hits(),
            m.misses(),
            m.transferred_bytes,
            m.step_time_s * 1e6
        );
        p.append_tokens(id, 1)?;
    }
    println!("finished: {}", p.is_finished(id)?);
    Ok(())
}
