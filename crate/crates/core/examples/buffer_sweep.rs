//! Realized TPOT against the ideal envelope as the buffer ratio grows.

use std::path::Path;

use kvtier::sim::{compare, generate_trace_file, ComparePoint, SimConfig};

fn main() -> kvtier::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quickstart.json");
    let config = SimConfig::load(&path)?;
    let context = config.compare.context;
    let trace = generate_trace_file(&config, context, 300)?;

    let points = compare(&config, &trace, context, &[1.0, 2.0, 4.0, 8.0])?;
    println!("{}", ComparePoint::CSV_HEADER);
    for p in &points {
        println!("{}", p.csv_row());
    }
    Ok(())
}
