//! Synthetic selection traces, Poisson arrivals and their file formats.
//!
//! A selection trace evolves a working set: each step keeps every previous
//! id with probability `p` and refills the budget from a Zipf distribution
//! over ids, never duplicating an id already picked for the step.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Exp, Zipf};
use serde::{Deserialize, Serialize};

use crate::config::PartitionId;
use crate::error::{Error, Result};
use crate::oracle::AccessTrace;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalityModel {
    pub reuse_fraction: f64,
    pub zipf_s: f64,
    pub budget: usize,
    pub seed: u64,
}

impl LocalityModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.reuse_fraction) {
            return Err(Error::InvalidSpecParams(format!(
                "reuse_fraction {} not in [0, 1]",
                self.reuse_fraction
            )));
        }
        if !(self.zipf_s >= 0.0 && self.zipf_s.is_finite()) {
            return Err(Error::InvalidSpecParams(format!(
                "zipf_s {} must be >= 0",
                self.zipf_s
            )));
        }
        Ok(())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for a sub-key of a master seed. The master seed
/// keys the cipher; the folded sub-key selects the stream.
pub fn sub_rng(master: u64, parts: &[u64]) -> ChaCha8Rng {
    let stream = parts
        .iter()
        .fold(0x6b76_7469_6572_u64, |acc, &p| splitmix64(acc ^ p));
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng
}

/// Stateful step-by-step form of the locality model over a fixed id set.
/// Zipf rank `r` maps to `ids[r - 1]`.
#[derive(Debug, Clone)]
pub struct SelectionStream {
    ids: Vec<PartitionId>,
    weights: Vec<f64>,
    zipf: Zipf<f64>,
    reuse: f64,
    budget: usize,
    rng: ChaCha8Rng,
    current: Vec<PartitionId>,
    started: bool,
}

impl SelectionStream {
    pub fn new(model: &LocalityModel, ids: Vec<PartitionId>, rng: ChaCha8Rng) -> Result<Self> {
        model.validate()?;
        if model.budget > ids.len() {
            return Err(Error::BudgetTooLarge {
                budget: model.budget,
                num_partitions: ids.len(),
            });
        }
        let n = ids.len().max(1);
        let zipf = Zipf::new(n as f64, model.zipf_s)
            .map_err(|e| Error::InvalidSpecParams(e.to_string()))?;
        let weights = (1..=n).map(|r| (r as f64).powf(-model.zipf_s)).collect();
        Ok(Self {
            ids,
            weights,
            zipf,
            reuse: model.reuse_fraction,
            budget: model.budget,
            rng,
            current: Vec::new(),
            started: false,
        })
    }

    /// Draws `count` ranks not yet in `picked`.
    fn refill(&mut self, picked: &mut HashSet<usize>, count: usize) {
        let mut left = count;
        let mut misses = 0;
        while left > 0 {
            if misses > 64 {
                // Rejection is stalling on a heavy head; sample the
                // conditional distribution directly.
                let total: f64 = (0..self.ids.len())
                    .filter(|i| !picked.contains(i))
                    .map(|i| self.weights[i])
                    .sum();
                let mut u = self.rng.random::<f64>() * total;
                let mut pick = None;
                for i in (0..self.ids.len()).filter(|i| !picked.contains(i)) {
                    pick = Some(i);
                    u -= self.weights[i];
                    if u < 0.0 {
                        break;
                    }
                }
                picked.insert(pick.expect("budget <= ids"));
                left -= 1;
                misses = 0;
                continue;
            }
            let r = self.zipf.sample(&mut self.rng) as usize - 1;
            if picked.insert(r.min(self.ids.len() - 1)) {
                left -= 1;
                misses = 0;
            } else {
                misses += 1;
            }
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn ids(&self) -> &[PartitionId] {
        &self.ids
    }

    /// Adds newly selectable ids as the least popular ranks and resets the
    /// budget, capped at the number of ids.
    pub fn extend(&mut self, new_ids: &[PartitionId], budget: usize, zipf_s: f64) -> Result<()> {
        self.ids.extend_from_slice(new_ids);
        let n = self.ids.len();
        self.weights = (1..=n.max(1)).map(|r| (r as f64).powf(-zipf_s)).collect();
        self.zipf = Zipf::new(n.max(1) as f64, zipf_s)
            .map_err(|e| Error::InvalidSpecParams(e.to_string()))?;
        self.budget = budget.min(n);
        Ok(())
    }

    /// Selection for the next step, ascending by id.
    pub fn next_step(&mut self) -> Vec<PartitionId> {
        let mut picked: HashSet<usize> = HashSet::with_capacity(self.budget);
        if self.started {
            for &rank in &self.current {
                if self.rng.random::<f64>() < self.reuse {
                    picked.insert(rank as usize);
                }
            }
        }
        self.started = true;
        let need = self.budget.saturating_sub(picked.len());
        self.refill(&mut picked, need);
        let mut ranks: Vec<PartitionId> = picked.into_iter().map(|r| r as PartitionId).collect();
        ranks.sort_unstable();
        let mut out: Vec<PartitionId> = ranks.iter().map(|&r| self.ids[r as usize]).collect();
        self.current = ranks;
        out.sort_unstable();
        out
    }
}

/// Selections for `steps` steps over ids `0..num_partitions`.
pub fn generate_trace(
    model: &LocalityModel,
    num_partitions: u32,
    steps: usize,
) -> Result<Vec<Vec<PartitionId>>> {
    let rng = ChaCha8Rng::seed_from_u64(model.seed);
    let mut stream = SelectionStream::new(model, (0..num_partitions).collect(), rng)?;
    Ok((0..steps).map(|_| stream.next_step()).collect())
}

/// Single-page access trace for the oracles.
pub fn generate_access_trace(
    model: &LocalityModel,
    num_partitions: u32,
    steps: usize,
    capacity: u64,
) -> Result<AccessTrace> {
    let sel = generate_trace(model, num_partitions, steps)?;
    AccessTrace::new(sel, vec![1; num_partitions as usize], capacity)
}

/// Mean fraction of each step's selection that was also selected the step before.
pub fn mean_overlap(steps: &[Vec<PartitionId>]) -> f64 {
    if steps.len() < 2 {
        return 0.0;
    }
    let total: f64 = steps
        .windows(2)
        .map(|w| {
            let prev: HashSet<_> = w[0].iter().collect();
            let shared = w[1].iter().filter(|id| prev.contains(id)).count();
            shared as f64 / w[1].len().max(1) as f64
        })
        .sum();
    total / (steps.len() - 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub min: u64,
    pub max: u64,
    pub avg: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataset {
    LongBenchV2,
    LongGenBench,
    Custom { input: LengthStats, output: LengthStats },
}

const K: u64 = 1024;

impl Dataset {
    pub fn input(&self) -> LengthStats {
        match self {
            Dataset::LongBenchV2 => LengthStats {
                min: 32 * K,
                max: 120 * K,
                avg: 55 * K,
            },
            Dataset::LongGenBench => LengthStats {
                min: 16 * K,
                max: 19 * K,
                avg: 18 * K,
            },
            Dataset::Custom { input, .. } => *input,
        }
    }

    pub fn output(&self) -> LengthStats {
        match self {
            Dataset::LongBenchV2 => LengthStats {
                min: 500,
                max: 15 * K,
                avg: 5 * K,
            },
            Dataset::LongGenBench => LengthStats {
                min: 7 * K,
                max: 32 * K,
                avg: 12 * K,
            },
            Dataset::Custom { output, .. } => *output,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrivalProcess {
    pub rate: f64,
    pub count: usize,
    pub seed: u64,
    pub dataset: Dataset,
    /// Multiplies every length bound; below 1 shrinks requests for quick runs.
    #[serde(default = "one")]
    pub length_scale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arrival {
    pub arrival_s: f64,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

/// Beta on `[min, max]` with mean `avg`.
struct LengthSampler {
    min: f64,
    span: f64,
    beta: Option<Beta<f64>>,
}

const LENGTH_CONCENTRATION: f64 = 4.0;

impl LengthSampler {
    fn new(stats: LengthStats, scale: f64) -> Result<Self> {
        if !(stats.min <= stats.avg && stats.avg <= stats.max) {
            return Err(Error::InvalidSpecParams(format!(
                "length stats {stats:?} need min <= avg <= max"
            )));
        }
        let min = (stats.min as f64 * scale).max(1.0);
        let max = (stats.max as f64 * scale).max(min);
        let span = max - min;
        let beta = if stats.max > stats.min && stats.avg > stats.min && stats.avg < stats.max {
            let m = (stats.avg - stats.min) as f64 / (stats.max - stats.min) as f64;
            Some(
                Beta::new(m * LENGTH_CONCENTRATION, (1.0 - m) * LENGTH_CONCENTRATION)
                    .map_err(|e| Error::InvalidSpecParams(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Self { min, span, beta })
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> u64 {
        let u = self.beta.as_ref().map_or(0.0, |b| b.sample(rng));
        (self.min + u * self.span).round().max(1.0) as u64
    }
}

/// Arrival times from exponential inter-arrival gaps, with lengths drawn
/// inside the dataset's bounds.
pub fn poisson_arrivals(proc: &ArrivalProcess) -> Result<Vec<Arrival>> {
    if !(proc.rate > 0.0 && proc.rate.is_finite()) {
        return Err(Error::InvalidSpecParams(format!(
            "arrival rate {} must be > 0",
            proc.rate
        )));
    }
    if proc.length_scale.is_nan() || proc.length_scale <= 0.0 {
        return Err(Error::InvalidSpecParams("length_scale must be > 0".into()));
    }
    let gap = Exp::new(proc.rate).map_err(|e| Error::InvalidSpecParams(e.to_string()))?;
    let input = LengthSampler::new(proc.dataset.input(), proc.length_scale)?;
    let output = LengthSampler::new(proc.dataset.output(), proc.length_scale)?;
    let mut times = sub_rng(proc.seed, &[0xa7]);
    let mut lengths = sub_rng(proc.seed, &[0x1e]);
    let mut t = 0.0;
    Ok((0..proc.count)
        .map(|_| {
            t += gap.sample(&mut times);
            Arrival {
                arrival_s: t,
                input_tokens: input.sample(&mut lengths),
                output_tokens: output.sample(&mut lengths),
            }
        })
        .collect())
}

pub fn write_arrivals<W: Write>(arrivals: &[Arrival], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for a in arrivals {
        w.serialize(a).map_err(|e| Error::Io(e.to_string()))?;
    }
    if arrivals.is_empty() {
        w.write_record(["arrival_s", "input_tokens", "output_tokens"])
            .map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_arrivals<R: Read>(input: R) -> Result<Vec<Arrival>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (i, rec) in r.deserialize().enumerate() {
        let a: Arrival = rec.map_err(|e| Error::parse(i + 2, e.to_string()))?;
        out.push(a);
    }
    Ok(out)
}

pub fn read_arrivals_file(path: &Path) -> Result<Vec<Arrival>> {
    read_arrivals(File::open(path)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub layer: u32,
    pub head: u32,
    pub sel: Vec<PartitionId>,
}

/// Multi-head selection trace as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceFile {
    pub num_partitions: u32,
    pub budget: usize,
    pub records: Vec<TraceRecord>,
}

pub const TRACE_MAGIC: &str = "#kvtier-trace v1";

impl TraceFile {
    pub fn single_head(num_partitions: u32, budget: usize, steps: &[Vec<PartitionId>]) -> Self {
        Self {
            num_partitions,
            budget,
            records: steps
                .iter()
                .enumerate()
                .map(|(i, sel)| TraceRecord {
                    step: i as u64,
                    layer: 0,
                    head: 0,
                    sel: sel.clone(),
                })
                .collect(),
        }
    }

    /// Selections of one (layer, head), ordered by step.
    pub fn project(&self, layer: u32, head: u32) -> Vec<Vec<PartitionId>> {
        let steps: BTreeMap<u64, &Vec<PartitionId>> = self
            .records
            .iter()
            .filter(|r| r.layer == layer && r.head == head)
            .map(|r| (r.step, &r.sel))
            .collect();
        steps.into_values().cloned().collect()
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut w = BufWriter::new(out);
        writeln!(
            w,
            "{TRACE_MAGIC} num_partitions={} budget={}",
            self.num_partitions, self.budget
        )?;
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::Io(e.to_string()))?;
            writeln!(w, "{line}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut lines = BufReader::new(input).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(1, "missing header"))??;
        let (num_partitions, budget) = parse_header(&header)?;
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let n = i + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TraceRecord =
                serde_json::from_str(&line).map_err(|e| Error::parse(n, e.to_string()))?;
            if let Some(id) = rec.sel.iter().find(|&&id| id >= num_partitions) {
                return Err(Error::parse(
                    n,
                    format!("partition id {id} outside declared range 0..{num_partitions}"),
                ));
            }
            records.push(rec);
        }
        Ok(Self {
            num_partitions,
            budget,
            records,
        })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        self.write(File::create(path)?)
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        Self::read(File::open(path)?)
    }
}

fn parse_header(line: &str) -> Result<(u32, usize)> {
    let rest = line
        .strip_prefix(TRACE_MAGIC)
        .ok_or_else(|| Error::parse(1, format!("expected header starting with '{TRACE_MAGIC}'")))?;
    let mut n = None;
    let mut k = None;
    for field in rest.split_whitespace() {
        let (name, value) = field
            .split_once('=')
            .ok_or_else(|| Error::parse(1, format!("malformed header field '{field}'")))?;
        let bad = |_| Error::parse(1, format!("bad value in '{field}'"));
        match name {
            "num_partitions" => n = Some(value.parse().map_err(bad)?),
            "budget" => k = Some(value.parse().map_err(bad)?),
            _ => return Err(Error::parse(1, format!("unknown header field '{name}'"))),
        }
    }
    match (n, k) {
        (Some(n), Some(k)) => Ok((n, k)),
        _ => Err(Error::parse(1, "header needs num_partitions and budget")),
    }
}
