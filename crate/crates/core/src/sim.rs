//! Experiment driver: arrivals feed the scheduler, admitted requests decode
//! step by step through the pipeline, and every step is priced.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{validate_config, Granularity, HeadKey, ModelShape, PartitionId, RequestId, SparseConfig, TierParams};
use crate::envelope::{envelope_curve, tpot, tpot_from_bytes, EnvelopeParams, EnvelopePoint};
use crate::error::{Error, Result};
use crate::metadata::{FootprintReport, MetadataConfig, MetadataStore};
use crate::oracle::{belady, lru_reference, AccessTrace};
use crate::pipeline::{
    prefill_index, IndexParams, Pipeline, RequestSpec, RequestStepMetrics, SelectorConfig,
    StepMetrics, TracePlayback,
};
use crate::replacement::ReplacementParams;
use crate::scheduler::{Admission, GrantMode, Scheduler, SchedulerConfig};
use crate::workload::{
    generate_trace, poisson_arrivals, read_arrivals_file, sub_rng, Arrival, ArrivalProcess,
    Dataset, LocalityModel, TraceFile, TraceRecord,
};

const ARRIVAL_STREAM: u64 = 1;
const SELECTION_STREAM: u64 = 2;
const TRACE_STREAM: u64 = 3;

/// Seed for one named sub-stream of the master seed.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    sub_rng(master, parts).random()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CachePolicy {
    /// Mandatory pages plus elastic buffering under bucketed LRU.
    #[default]
    Buffered,
    /// Only the current step's pages; reuse limited to the previous step.
    MandatoryOnly,
    /// Every selected partition is fetched on every step.
    NoCache,
    /// Whole KV cache kept on the device; nothing is offloaded.
    DeviceOnly,
}

impl CachePolicy {
    pub const ALL: [CachePolicy; 4] = [
        CachePolicy::Buffered,
        CachePolicy::MandatoryOnly,
        CachePolicy::NoCache,
        CachePolicy::DeviceOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CachePolicy::Buffered => "buffered",
            CachePolicy::MandatoryOnly => "mandatory_only",
            CachePolicy::NoCache => "no_cache",
            CachePolicy::DeviceOnly => "device_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum WorkloadSource {
    Poisson {
        rate: f64,
        count: usize,
        dataset: Dataset,
        #[serde(default = "one")]
        length_scale: f64,
    },
    Inline {
        arrivals: Vec<Arrival>,
    },
    Csv {
        path: PathBuf,
    },
}

fn one() -> f64 {
    1.0
}

impl Default for WorkloadSource {
    fn default() -> Self {
        WorkloadSource::Inline {
            arrivals: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerSection {
    #[serde(default = "five")]
    pub min_buffer_ratio: f64,
    /// Defaults to the metadata `max_batch`.
    #[serde(default)]
    pub max_batch: Option<usize>,
}

fn five() -> f64 {
    5.0
}

impl Default for SchedulerSection {
    fn default() -> Self {
        Self {
            min_buffer_ratio: five(),
            max_batch: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSection {
    pub context: u64,
    pub steps: usize,
    pub ratios: Vec<f64>,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            context: 32_768,
            steps: 10_000,
            ratios: vec![1.0, 2.0, 3.0, 4.0, 6.0, 8.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeSection {
    pub context: u64,
    pub batches: Vec<u64>,
    /// Fixed miss ratio; Belady on a generated trace when absent.
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default = "thousand")]
    pub steps: usize,
}

fn thousand() -> usize {
    1000
}

impl Default for EnvelopeSection {
    fn default() -> Self {
        Self {
            context: 32_768,
            batches: vec![1, 2, 4, 8, 16, 32],
            rho: None,
            steps: thousand(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FootprintSection {
    pub context: u64,
    #[serde(default = "one_u64")]
    pub requests: u64,
}

fn one_u64() -> u64 {
    1
}

impl Default for FootprintSection {
    fn default() -> Self {
        Self {
            context: 131_072,
            requests: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub model: ModelShape,
    pub sparse: SparseConfig,
    pub tiers: TierParams,
    #[serde(default)]
    pub metadata: MetadataConfig,
    #[serde(default)]
    pub replacement: ReplacementParams,
    #[serde(default)]
    pub scheduler: SchedulerSection,
    #[serde(default)]
    pub index: IndexParams,
    #[serde(default)]
    pub cache_policy: CachePolicy,
    pub selector: SelectorConfig,
    #[serde(default)]
    pub workload: WorkloadSource,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub compare: CompareSection,
    #[serde(default)]
    pub envelope: EnvelopeSection,
    #[serde(default)]
    pub footprint: FootprintSection,
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(e.line(), e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Every check that can fail before a run starts.
    pub fn validate(&self) -> Result<()> {
        validate_config(self.model, self.sparse, self.tiers)?;
        self.replacement.validate()?;
        self.scheduler_config(0).validate()?;
        if let SelectorConfig::Synthetic {
            reuse_fraction,
            zipf_s,
        } = self.selector
        {
            LocalityModel {
                reuse_fraction,
                zipf_s,
                budget: 0,
                seed: 0,
            }
            .validate()?;
        }
        if let WorkloadSource::Poisson { rate, length_scale, .. } = self.workload {
            if !(rate > 0.0 && length_scale > 0.0) {
                return Err(Error::InvalidSpecParams(
                    "poisson rate and length_scale must be > 0".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn scheduler_config(&self, device_page_budget: u64) -> SchedulerConfig {
        SchedulerConfig {
            min_buffer_ratio: self.scheduler.min_buffer_ratio,
            device_page_budget,
            max_batch: self
                .scheduler
                .max_batch
                .unwrap_or(self.metadata.max_batch as usize),
        }
    }

    /// Arrival schedule; relative CSV paths resolve against `base`.
    pub fn arrivals(&self, base: Option<&Path>) -> Result<Vec<Arrival>> {
        match &self.workload {
            WorkloadSource::Poisson {
                rate,
                count,
                dataset,
                length_scale,
            } => poisson_arrivals(&ArrivalProcess {
                rate: *rate,
                count: *count,
                seed: derive_seed(self.seed, &[ARRIVAL_STREAM]),
                dataset: *dataset,
                length_scale: *length_scale,
            }),
            WorkloadSource::Inline { arrivals } => Ok(arrivals.clone()),
            WorkloadSource::Csv { path } => {
                let full = match base {
                    Some(b) if path.is_relative() => b.join(path),
                    _ => path.clone(),
                };
                read_arrivals_file(&full)
            }
        }
    }

    fn pipeline(&self, trace: Option<TraceFile>) -> Result<Pipeline> {
        Pipeline::new(
            self.model,
            self.sparse,
            self.tiers,
            self.metadata,
            self.replacement,
            self.index.clone(),
            self.selector,
            trace.map(TracePlayback::new),
        )
    }

    /// Partitions selected per step at `context` tokens.
    pub fn budget_partitions(&self, context: u64) -> usize {
        let tokens = self.sparse.budget_tokens(context);
        let per = match self.sparse.partition_granularity {
            Granularity::Fixed(g) => g as f64,
            Granularity::Variable => {
                let p = &self.index.variable_pattern;
                p.iter().sum::<u64>() as f64 / p.len().max(1) as f64
            }
        };
        (tokens / per).ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SchedEvent {
    Admit {
        request: RequestId,
        pages: u64,
        mandatory: u64,
    },
    Queue {
        request: RequestId,
        required: u64,
        available: u64,
    },
    Reclaim {
        request: RequestId,
        pages: u64,
    },
    Preempt {
        request: RequestId,
        generated: u64,
    },
    Finish {
        request: RequestId,
    },
}

/// One line of the step stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub start_s: f64,
    pub batch: usize,
    #[serde(flatten)]
    pub metrics: StepMetrics,
    pub events: Vec<SchedEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: SimConfig,
    pub requests: u64,
    pub completed: u64,
    pub output_tokens: u64,
    pub decode_steps: u64,
    pub sim_seconds: f64,
    pub throughput_tokens_per_s: f64,
    /// Queueing delay plus one step; prefill is not modelled.
    pub mean_ttft_proxy_s: f64,
    pub mean_tpot_s: f64,
    pub mean_batch_size: f64,
    pub hit_ratio: f64,
    pub transferred_bytes: u64,
    pub preemptions: u64,
    pub peak_footprint: FootprintReport,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Step sink writing one JSON object per line.
pub fn json_lines<W: Write>(mut out: W) -> impl FnMut(&StepRecord) -> Result<()> {
    move |r| {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Io(e.to_string()))?;
        out.write_all(b"\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Tracked {
    arrival_s: f64,
    output_total: u64,
    emitted: u64,
    started: bool,
    preemptions: u64,
}

struct Run<'a> {
    config: &'a SimConfig,
    pipeline: Pipeline,
    scheduler: Scheduler,
    tracked: BTreeMap<RequestId, Tracked>,
    queue: VecDeque<RequestSpec>,
    last_selection: BTreeMap<RequestId, Vec<Vec<PartitionId>>>,
    peak: FootprintReport,
    events: Vec<SchedEvent>,
    preemptions: u64,
}

impl Run<'_> {
    fn policy(&self) -> CachePolicy {
        self.config.cache_policy
    }

    /// Pages a whole request occupies per head when nothing is offloaded.
    fn full_pages(&self, tokens: u64) -> Result<u64> {
        let spec = prefill_index(
            tokens,
            self.config.model.max_context,
            &self.config.sparse,
            &self.config.index,
        )?;
        let pages: u64 = spec
            .token_counts()?
            .iter()
            .map(|&c| self.config.sparse.pages_for_tokens(c))
            .sum();
        Ok(pages.min(self.pipeline.store().layout().max_device_pages_per_head))
    }

    fn shrink_reclaimed(&mut self, reclaimed: &[(RequestId, u64)]) -> Result<()> {
        for &(other, pages) in reclaimed {
            let total = self
                .scheduler
                .grant(other)
                .map(|g| g.total())
                .ok_or_else(|| Error::Invariant(format!("reclaimed from unknown {other}")))?;
            let protect = self.last_selection.get(&other);
            self.pipeline.set_capacity(other, total, protect)?;
            self.events.push(SchedEvent::Reclaim {
                request: other,
                pages,
            });
        }
        Ok(())
    }

    fn admit_queued(&mut self) -> Result<()> {
        while let Some(&spec) = self.queue.front() {
            let mandatory = if self.policy() == CachePolicy::DeviceOnly {
                self.full_pages(spec.prompt_tokens + spec.output_tokens)?
            } else {
                self.pipeline.estimate_mandatory(spec.prompt_tokens)?
            };
            match self
                .scheduler
                .try_admit(spec.id, mandatory, spec.prompt_tokens)
            {
                Admission::Admitted { grant, reclaimed } => {
                    self.queue.pop_front();
                    self.shrink_reclaimed(&reclaimed)?;
                    self.pipeline.offload(spec)?;
                    self.pipeline.set_capacity(spec.id, grant.total(), None)?;
                    self.events.push(SchedEvent::Admit {
                        request: spec.id,
                        pages: grant.total(),
                        mandatory,
                    });
                    let fp = self.pipeline.store().footprint();
                    if fp.two_level_bytes() > self.peak.two_level_bytes() {
                        self.peak = fp;
                    }
                }
                Admission::Queued {
                    required,
                    available,
                } => {
                    if self.scheduler.active().is_empty() {
                        return Err(Error::InsufficientBuffer {
                            demand: required,
                            available,
                        });
                    }
                    self.events.push(SchedEvent::Queue {
                        request: spec.id,
                        required,
                        available,
                    });
                    break;
                }
            }
        }
        Ok(())
    }

    fn preempt(&mut self, id: RequestId) -> Result<()> {
        let context = self.pipeline.context_tokens(id)?;
        let generated = self.pipeline.generated(id)?;
        self.pipeline.release(id)?;
        self.scheduler.release(id);
        self.last_selection.remove(&id);
        let t = self.tracked.get_mut(&id).expect("tracked on arrival");
        t.preemptions += 1;
        self.preemptions += 1;
        self.queue.push_front(RequestSpec {
            id,
            prompt_tokens: context,
            output_tokens: t.output_total - t.emitted,
            selection_seed: derive_seed(
                self.config.seed,
                &[SELECTION_STREAM, id.0, t.preemptions],
            ),
        });
        self.events.push(SchedEvent::Preempt {
            request: id,
            generated,
        });
        Ok(())
    }

    /// Retargets the grant for this step's selections, preempting the
    /// youngest request until it fits. False when `id` itself was preempted.
    fn fit_grant(&mut self, id: RequestId, selections: &[Vec<PartitionId>]) -> Result<bool> {
        let mandatory = self.pipeline.mandatory_pages(id, &selections.to_vec())?;
        loop {
            let length = self.pipeline.context_tokens(id)?;
            match self.scheduler.buffer_target(id, mandatory, length) {
                Ok(update) => {
                    self.shrink_reclaimed(&update.reclaimed)?;
                    self.pipeline
                        .set_capacity(id, update.grant.total(), Some(&selections.to_vec()))?;
                    return Ok(true);
                }
                Err(Error::InsufficientBuffer { .. }) => {
                    let victim = self.scheduler.youngest().expect("id is active");
                    self.preempt(victim)?;
                    if victim == id {
                        return Ok(false);
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn decode(&mut self) -> Result<(Vec<RequestId>, Vec<RequestStepMetrics>)> {
        let batch: Vec<RequestId> = self.scheduler.active().to_vec();
        let mut stepped = Vec::new();
        let mut metrics = Vec::new();
        for id in batch {
            if self.scheduler.grant(id).is_none() {
                continue;
            }
            let selections = self.pipeline.select_request(id)?;
            if self.policy() != CachePolicy::DeviceOnly && !self.fit_grant(id, &selections)? {
                continue;
            }
            let mut m = self.pipeline.execute(id, &selections)?;
            if self.policy() == CachePolicy::DeviceOnly {
                m.hits += m.misses;
                m.misses = 0;
                m.transferred_bytes = 0;
                m.plans_with_copies = 0;
            }
            self.last_selection.insert(id, selections);
            stepped.push(id);
            metrics.push(m);
        }
        Ok((stepped, metrics))
    }
}

/// Runs `arrivals` to completion. `trace` backs trace playback selection.
/// Each step is handed to `on_step`.
pub fn run_sim<F>(
    config: &SimConfig,
    arrivals: &[Arrival],
    trace: Option<TraceFile>,
    mut on_step: F,
) -> Result<RunReport>
where
    F: FnMut(&StepRecord) -> Result<()>,
{
    config.validate()?;
    let pipeline = config.pipeline(trace)?;
    let lanes = pipeline.device_pages_per_lane();
    let mode = match config.cache_policy {
        CachePolicy::Buffered => GrantMode::Elastic,
        _ => GrantMode::MandatoryOnly,
    };
    let scheduler = Scheduler::new(config.scheduler_config(lanes), mode)?;
    let peak = pipeline.store().footprint();

    let mut order: Vec<usize> = (0..arrivals.len()).collect();
    order.sort_by(|&a, &b| arrivals[a].arrival_s.total_cmp(&arrivals[b].arrival_s).then(a.cmp(&b)));
    let mut pending: VecDeque<(f64, RequestSpec)> = VecDeque::new();
    let mut tracked = BTreeMap::new();
    for (i, &k) in order.iter().enumerate() {
        let a = arrivals[k];
        if a.input_tokens + a.output_tokens > config.model.max_context {
            return Err(Error::InvalidSpecParams(format!(
                "arrival {k}: {} + {} tokens exceed max_context {}",
                a.input_tokens, a.output_tokens, config.model.max_context
            )));
        }
        let id = RequestId(i as u64);
        pending.push_back((
            a.arrival_s,
            RequestSpec {
                id,
                prompt_tokens: a.input_tokens,
                output_tokens: a.output_tokens,
                selection_seed: derive_seed(config.seed, &[SELECTION_STREAM, id.0, 0]),
            },
        ));
        tracked.insert(
            id,
            Tracked {
                arrival_s: a.arrival_s,
                output_total: a.output_tokens,
                emitted: 0,
                started: false,
                preemptions: 0,
            },
        );
    }

    let mut run = Run {
        config,
        pipeline,
        scheduler,
        tracked,
        queue: VecDeque::new(),
        last_selection: BTreeMap::new(),
        peak,
        events: Vec::new(),
        preemptions: 0,
    };

    let mut now = 0.0_f64;
    let mut step = 0_u64;
    let mut output_tokens = 0_u64;
    let mut token_time = 0.0_f64;
    let mut batch_sum = 0_u64;
    let mut hits = 0_u64;
    let mut lookups = 0_u64;
    let mut transferred = 0_u64;
    let mut completed = 0_u64;
    let mut ttft_sum = 0.0_f64;
    let mut ttft_count = 0_u64;

    loop {
        while pending.front().is_some_and(|p| p.0 <= now) {
            let (_, spec) = pending.pop_front().expect("checked");
            if spec.output_tokens == 0 {
                completed += 1;
                run.events.push(SchedEvent::Finish { request: spec.id });
                continue;
            }
            run.queue.push_back(spec);
        }
        run.admit_queued()?;
        if run.scheduler.active().is_empty() {
            match pending.front() {
                Some(p) => {
                    now = now.max(p.0);
                    continue;
                }
                None => break,
            }
        }
        let start = now;
        let (stepped, metrics) = run.decode()?;
        if stepped.is_empty() {
            if run.scheduler.active().is_empty() && run.queue.is_empty() {
                continue;
            }
            return Err(Error::Invariant(
                "decode step made no progress after preemption".into(),
            ));
        }
        let sm = StepMetrics::from_requests(step, metrics, &config.tiers);
        now += sm.step_time_s;
        hits += sm.hits();
        lookups += sm.hits() + sm.misses();
        transferred += sm.transferred_bytes;
        batch_sum += stepped.len() as u64;
        output_tokens += stepped.len() as u64;
        token_time += sm.step_time_s * stepped.len() as f64;
        for &id in &stepped {
            let t = run.tracked.get_mut(&id).expect("tracked");
            if !t.started {
                t.started = true;
                ttft_sum += start - t.arrival_s + sm.step_time_s;
                ttft_count += 1;
            }
            t.emitted += 1;
            if config.cache_policy == CachePolicy::NoCache {
                run.pipeline.invalidate(id)?;
            }
            run.pipeline.append_tokens(id, 1)?;
            if run.pipeline.is_finished(id)? {
                run.pipeline.release(id)?;
                run.scheduler.release(id);
                run.last_selection.remove(&id);
                completed += 1;
                run.events.push(SchedEvent::Finish { request: id });
            }
        }
        let record = StepRecord {
            start_s: start,
            batch: stepped.len(),
            metrics: sm,
            events: std::mem::take(&mut run.events),
        };
        on_step(&record)?;
        step += 1;
    }

    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    Ok(RunReport {
        config: config.clone(),
        requests: arrivals.len() as u64,
        completed,
        output_tokens,
        decode_steps: step,
        sim_seconds: now,
        throughput_tokens_per_s: ratio(output_tokens as f64, now),
        mean_ttft_proxy_s: ratio(ttft_sum, ttft_count as f64),
        mean_tpot_s: ratio(token_time, output_tokens as f64),
        mean_batch_size: ratio(batch_sum as f64, step as f64),
        hit_ratio: ratio(hits as f64, lookups as f64),
        transferred_bytes: transferred,
        preemptions: run.preemptions,
        peak_footprint: run.peak,
    })
}

/// Synthetic selections for every head of one request, from the configured
/// locality model. Each head draws from its own sub-seed.
pub fn generate_trace_file(config: &SimConfig, context: u64, steps: usize) -> Result<TraceFile> {
    let SelectorConfig::Synthetic {
        reuse_fraction,
        zipf_s,
    } = config.selector
    else {
        return Err(Error::InvalidSpecParams(
            "trace generation needs a synthetic selector".into(),
        ));
    };
    let spec = prefill_index(context, config.model.max_context, &config.sparse, &config.index)?;
    let n = spec.token_counts()?.len() as u32;
    let selectable: Vec<PartitionId> = (0..n).filter(|i| !spec.pinned.contains(i)).collect();
    let budget = config.budget_partitions(context).min(selectable.len());
    let mut per_head = Vec::new();
    for layer in 0..config.model.num_layers {
        for head in 0..config.model.num_kv_heads {
            let model = LocalityModel {
                reuse_fraction,
                zipf_s,
                budget,
                seed: derive_seed(config.seed, &[TRACE_STREAM, layer as u64, head as u64]),
            };
            let sel = generate_trace(&model, selectable.len() as u32, steps)?;
            let mapped: Vec<Vec<PartitionId>> = sel
                .into_iter()
                .map(|s| s.into_iter().map(|r| selectable[r as usize]).collect())
                .collect();
            per_head.push((layer, head, mapped));
        }
    }
    let mut records = Vec::with_capacity(steps * per_head.len());
    for step in 0..steps {
        for (layer, head, sel) in &per_head {
            records.push(TraceRecord {
                step: step as u64,
                layer: *layer,
                head: *head,
                sel: sel[step].clone(),
            });
        }
    }
    Ok(TraceFile {
        num_partitions: n,
        budget,
        records,
    })
}

fn trace_steps(trace: &TraceFile) -> u64 {
    trace.records.iter().map(|r| r.step + 1).max().unwrap_or(0)
}

/// A single request of `context` prompt tokens replaying `trace`.
#[derive(Debug, Clone)]
pub struct TraceRun {
    pub report: RunReport,
    pub steps: Vec<StepMetrics>,
}

pub fn trace_run(
    config: &SimConfig,
    trace: &TraceFile,
    context: u64,
    policy: CachePolicy,
    ratio: f64,
) -> Result<TraceRun> {
    let mut cfg = config.clone();
    cfg.cache_policy = policy;
    cfg.scheduler.min_buffer_ratio = ratio;
    cfg.selector = SelectorConfig::TracePlayback;
    let arrivals = vec![Arrival {
        arrival_s: 0.0,
        input_tokens: context,
        output_tokens: trace_steps(trace),
    }];
    cfg.workload = WorkloadSource::Inline {
        arrivals: arrivals.clone(),
    };
    let mut steps = Vec::new();
    let report = run_sim(&cfg, &arrivals, Some(trace.clone()), |r| {
        steps.push(r.metrics.clone());
        Ok(())
    })?;
    Ok(TraceRun { report, steps })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparePoint {
    pub ratio: f64,
    /// Unpinned device pages per head.
    pub capacity_pages: u64,
    pub realized_tpot_s: f64,
    pub envelope_tpot_s: f64,
    pub hit_ratio: f64,
    pub realized_rho: f64,
    pub lru_miss_ratio: f64,
    pub belady_miss_ratio: f64,
    pub throughput_tokens_per_s: f64,
}

impl ComparePoint {
    pub const CSV_HEADER: &'static str = "ratio,capacity_pages,realized_tpot_s,envelope_tpot_s,hit_ratio,realized_rho,lru_miss_ratio,belady_miss_ratio,throughput_tokens_per_s";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.ratio,
            self.capacity_pages,
            self.realized_tpot_s,
            self.envelope_tpot_s,
            self.hit_ratio,
            self.realized_rho,
            self.lru_miss_ratio,
            self.belady_miss_ratio,
            self.throughput_tokens_per_s
        )
    }
}

/// Buffer-ratio sweep of one request replaying `trace`: realized TPOT from
/// the simulator against the envelope with Belady misses at the same
/// per-head capacity, plus the true-LRU miss ratio.
pub fn compare(
    config: &SimConfig,
    trace: &TraceFile,
    context: u64,
    ratios: &[f64],
) -> Result<Vec<ComparePoint>> {
    let probe = config.pipeline(Some(trace.clone()))?;
    let spec = prefill_index(context, config.model.max_context, &config.sparse, &config.index)?;
    let pages: Vec<u64> = spec
        .token_counts()?
        .iter()
        .map(|&c| config.sparse.pages_for_tokens(c))
        .collect();
    let pinned: u64 = spec.pinned.iter().map(|&i| pages[i as usize]).sum();
    let mandatory = probe.estimate_mandatory(context)?;
    let max_per_head = probe.store().layout().max_device_pages_per_head;
    let steps = trace_steps(trace) as usize;
    let page_bytes = probe.page_bytes() as f64;

    let mut heads = Vec::new();
    for layer in 0..config.model.num_layers {
        for head in 0..config.model.num_kv_heads {
            let sel: Vec<Vec<PartitionId>> = trace
                .project(layer, head)
                .into_iter()
                .map(|s| s.into_iter().filter(|i| !spec.pinned.contains(i)).collect())
                .collect();
            heads.push(sel);
        }
    }

    let mut out = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let mut cfg = config.clone();
        cfg.scheduler.min_buffer_ratio = ratio;
        let sched = Scheduler::new(cfg.scheduler_config(u64::MAX), GrantMode::Elastic)?;
        let capacity = sched.requirement(mandatory).min(max_per_head) - pinned;
        let run = trace_run(config, trace, context, CachePolicy::Buffered, ratio)?;

        let mut step_belady = vec![0u64; steps];
        let (mut lru_miss, mut bel_miss, mut demand) = (0u64, 0u64, 0u64);
        for sel in &heads {
            let t = AccessTrace::new(sel.clone(), pages.clone(), capacity)?;
            demand += t.total_demand();
            lru_miss += lru_reference(&t).miss_pages;
            let b = belady(&t, capacity)?;
            bel_miss += b.miss_pages;
            for (s, m) in b.step_miss_pages.iter().enumerate() {
                step_belady[s] += m;
            }
        }
        let tiers = &config.tiers;
        let (mut env_sum, mut real_sum, mut moved, mut selected) = (0.0, 0.0, 0.0, 0.0);
        for (s, m) in run.steps.iter().enumerate() {
            let qk: f64 = m.requests.iter().map(|r| r.qk_bytes).sum();
            let kv: f64 = m.requests.iter().map(|r| r.selected_kv_bytes).sum();
            let miss_bytes = step_belady[s] as f64 * page_bytes;
            let rho = if kv > 0.0 { miss_bytes / kv } else { 0.0 };
            env_sum += tpot_from_bytes(qk, kv, rho, tiers.bw_hbm, tiers.bw_pcie, tiers.t_mlp).total_s;
            real_sum += m.step_time_s;
            moved += m.transferred_bytes as f64;
            selected += kv;
        }
        let n = run.steps.len().max(1) as f64;
        let frac = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
        out.push(ComparePoint {
            ratio,
            capacity_pages: capacity,
            realized_tpot_s: real_sum / n,
            envelope_tpot_s: env_sum / n,
            hit_ratio: run.report.hit_ratio,
            realized_rho: frac(moved, selected),
            lru_miss_ratio: frac(lru_miss as f64, demand as f64),
            belady_miss_ratio: frac(bel_miss as f64, demand as f64),
            throughput_tokens_per_s: run.report.throughput_tokens_per_s,
        });
    }
    Ok(out)
}

/// Ideal TPOT per batch size for the configured envelope section.
pub fn envelope_table(config: &SimConfig, trace: Option<&TraceFile>) -> Result<Vec<EnvelopePoint>> {
    validate_config(config.model, config.sparse, config.tiers)?;
    let sec = &config.envelope;
    if sec.context == 0 {
        return Err(Error::InvalidSpecParams("envelope context must be >= 1".into()));
    }
    let base = EnvelopeParams {
        alpha: config.sparse.summary_ratio,
        beta: (config.sparse.budget_tokens(sec.context) / sec.context as f64).min(1.0),
        bw_hbm: config.tiers.bw_hbm,
        bw_pcie: config.tiers.bw_pcie,
        t_mlp: config.tiers.t_mlp,
        ..EnvelopeParams::from_shape(&config.model, sec.context, 1)
    };
    if let Some(rho) = sec.rho {
        return sec
            .batches
            .iter()
            .map(|&batch| {
                let p = EnvelopeParams { batch, rho, ..base };
                p.validate()?;
                Ok(EnvelopePoint {
                    batch,
                    capacity_pages: 0,
                    rho,
                    tpot: tpot(&p),
                })
            })
            .collect();
    }
    let spec = prefill_index(sec.context, config.model.max_context, &config.sparse, &config.index)?;
    let pages: Vec<u64> = spec
        .token_counts()?
        .iter()
        .map(|&c| config.sparse.pages_for_tokens(c))
        .collect();
    let file = match trace {
        Some(t) => t.clone(),
        None => generate_trace_file(
            &SimConfig {
                model: ModelShape {
                    num_layers: 1,
                    num_kv_heads: 1,
                    ..config.model
                },
                ..config.clone()
            },
            sec.context,
            sec.steps,
        )?,
    };
    let sel: Vec<Vec<PartitionId>> = file
        .project(0, 0)
        .into_iter()
        .map(|s| s.into_iter().filter(|i| !spec.pinned.contains(i)).collect())
        .collect();
    let total = pages.iter().sum::<u64>().max(1);
    let access = AccessTrace::new(sel, pages, total)?;
    envelope_curve(
        &base,
        &config.model,
        &config.sparse,
        &sec.batches,
        config.tiers.device_capacity,
        |_| Ok(access.clone()),
    )
}

/// Metadata of `requests` requests at `context` tokens, each head holding
/// its mandatory pages plus the minimum buffer, filled with distinct
/// partitions.
pub fn footprint_scenario(config: &SimConfig, context: u64, requests: u64) -> Result<FootprintReport> {
    validate_config(config.model, config.sparse, config.tiers)?;
    let mut store = MetadataStore::new(
        &config.model,
        &config.sparse,
        &config.tiers,
        &config.metadata,
        config.replacement.n_buckets,
    );
    let spec = prefill_index(context, config.model.max_context, &config.sparse, &config.index)?;
    let counts = spec.token_counts()?;
    let budget = config.budget_partitions(context);
    let probe = config.pipeline(None)?;
    let mandatory = probe.estimate_mandatory(context)?;
    let sched = Scheduler::new(config.scheduler_config(u64::MAX), GrantMode::Elastic)?;
    let grant = sched
        .requirement(mandatory)
        .min(store.layout().max_device_pages_per_head);
    let selectable: Vec<PartitionId> = (0..counts.len() as u32)
        .filter(|i| !spec.pinned.contains(i))
        .collect();
    for r in 0..requests {
        for layer in 0..config.model.num_layers {
            for head in 0..config.model.num_kv_heads {
                let key = HeadKey::new(r, layer, head);
                store.register_partitions(key, &spec)?;
                store.grow_device(&key, grant as u32)?;
                let mut free = grant - store.head(&key)?.pinned_pages() as u64;
                let mut at = 0;
                let mut step = 0;
                while at < selectable.len() {
                    let mut chunk = Vec::new();
                    let mut need = 0;
                    while at < selectable.len() && chunk.len() < budget.max(1) {
                        let p = config.sparse.pages_for_tokens(counts[selectable[at] as usize]);
                        if need + p > free {
                            break;
                        }
                        need += p;
                        chunk.push(selectable[at]);
                        at += 1;
                    }
                    if chunk.is_empty() {
                        break;
                    }
                    store.replace(&key, &chunk, step, &config.replacement)?;
                    free -= need;
                    step += 1;
                }
            }
        }
    }
    Ok(store.footprint())
}
