//! Ideal per-token decode latency as batch size and miss ratio vary.
//!
//! ```text
//! cargo run --example envelope_tpot
//! ```

use kvtier::config::ModelShape;
use kvtier::envelope::{kv_bytes, tpot, EnvelopeParams};

fn main() -> kvtier::Result<()> {
    let shape = ModelShape {
        num_layers: 36,
        num_kv_heads: 8,
        head_dim: 128,
        bytes_per_element: 2,
        max_context: 131_072,
    };
    let context = 65_536;
    println!(
        "full KV cache for one {context}-token request: {:.2} GiB",
        kv_bytes(&shape, context, 1) as f64 / (1u64 << 30) as f64
    );

    let base = EnvelopeParams {
        alpha: 1.0 / 16.0,
        beta: 0.05,
        bw_hbm: 3.35e12,
        bw_pcie: 5.5e10,
        t_mlp: 4.0e-3,
        ..EnvelopeParams::from_shape(&shape, context, 1)
    };

    println!("{:>4} {:>6} {:>10} {:>10} {:>10}", "B", "rho", "hbm ms", "pcie ms", "tpot ms");
    for batch in [1, 4, 16, 64] {
        for rho in [0.0, 0.1, 0.5] {
            let p = EnvelopeParams { batch, rho, ..base };
            p.validate()?;
            let t = tpot(&p);
            println!(
                "{batch:>4} {rho:>6.2} {:>10.3} {:>10.3} {:>10.3}",
                t.hbm_s * 1e3,
                t.pcie_s * 1e3,
                t.total_s * 1e3
            );
        }
    }
    Ok(())
}
