//! A Poisson request stream with dataset-shaped lengths, written as CSV.

use kvtier::workload::{poisson_arrivals, write_arrivals, ArrivalProcess, Dataset};

fn main() -> kvtier::Result<()> {
    let proc = ArrivalProcess {
        rate: 2.0,
        count: 500,
        seed: 42,
        dataset: Dataset::LongBenchV2,
        length_scale: 1.0,
    };
    let arrivals = poisson_arrivals(&proc)?;

    let n = arrivals.len() as f64;
    let span = arrivals.last().map_or(0.0, |a| a.arrival_s);
    let mean_in = arrivals.iter().map(|a| a.input_tokens as f64).sum::<f64>() / n;
    let mean_out = arrivals.iter().map(|a| a.output_tokens as f64).sum::<f64>() / n;
    println!("{} requests over {span:.1} s, observed rate {:.3}/s", arrivals.len(), n / span);
    println!("mean input {mean_in:.0} tokens, mean output {mean_out:.0} tokens");

    println!();
    write_arrivals(&arrivals[..5], std::io::stdout().lock())
}
