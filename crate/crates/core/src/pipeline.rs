//! Index, Offload, Select and Retrieve over the simulated tiers, with
//! attention reduced to the bytes it reads from device memory.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::config::{
    page_bytes, Granularity, HeadKey, ModelShape, PartitionId, RequestId, SparseConfig,
    TierParams,
};
use crate::error::{Error, Result};
use crate::metadata::{DevicePageId, HostPageId, MetadataConfig, MetadataStore};
use crate::partition::PartitionSpec;
use crate::replacement::{ReplacementOutcome, ReplacementParams};
use crate::workload::{sub_rng, LocalityModel, SelectionStream, TraceFile};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexParams {
    /// Leading partitions kept on the device.
    #[serde(default)]
    pub outliers: u32,
    /// Trailing partitions of the prompt kept on the device.
    #[serde(default)]
    pub window: u32,
    /// Partition sizes, cycled, under variable granularity.
    #[serde(default = "default_pattern")]
    pub variable_pattern: Vec<u64>,
}

fn default_pattern() -> Vec<u64> {
    vec![16]
}

impl Default for IndexParams {
    fn default() -> Self {
        Self {
            outliers: 0,
            window: 0,
            variable_pattern: default_pattern(),
        }
    }
}

/// Builds the partition spec of a prompt: uniform partitions under fixed
/// granularity, the cycled size pattern otherwise. Outliers and the trailing
/// window are pinned.
pub fn prefill_index(
    context_len: u64,
    max_context: u64,
    sparse: &SparseConfig,
    params: &IndexParams,
) -> Result<PartitionSpec> {
    if context_len > max_context {
        return Err(Error::InvalidSpecParams(format!(
            "context {context_len} exceeds max_context {max_context}"
        )));
    }
    let spec = match sparse.partition_granularity {
        Granularity::Fixed(g) => PartitionSpec::uniform(0, context_len, g),
        Granularity::Variable => {
            PartitionSpec::variable(pattern_ranges(0, context_len, &params.variable_pattern)?)
        }
    };
    with_pins(spec, params)
}

/// Variable spec from explicit ranges, pinned per `params`.
pub fn prefill_index_ranges(ranges: Vec<Range<u64>>, params: &IndexParams) -> Result<PartitionSpec> {
    with_pins(PartitionSpec::variable(ranges), params)
}

fn with_pins(spec: PartitionSpec, params: &IndexParams) -> Result<PartitionSpec> {
    let n = spec.token_counts()?.len() as u32;
    let pinned = (0..params.outliers.min(n)).chain(n.saturating_sub(params.window)..n);
    Ok(spec.with_pinned(pinned))
}

fn pattern_ranges(start: u64, end: u64, pattern: &[u64]) -> Result<Vec<Range<u64>>> {
    if pattern.is_empty() || pattern.contains(&0) {
        return Err(Error::InvalidSpecParams(
            "variable_pattern needs positive sizes".into(),
        ));
    }
    let mut out = Vec::new();
    let mut at = start;
    for &size in pattern.iter().cycle() {
        if at >= end {
            break;
        }
        let next = (at + size).min(end);
        out.push(at..next);
        at = next;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorConfig {
    Synthetic { reuse_fraction: f64, zipf_s: f64 },
    TracePlayback,
}

/// Selections read from a trace file, keyed by (step, layer, head).
#[derive(Debug, Clone)]
pub struct TracePlayback {
    file: TraceFile,
    index: HashMap<(u64, u32, u32), usize>,
}

impl TracePlayback {
    pub fn new(file: TraceFile) -> Self {
        let index = file
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| ((r.step, r.layer, r.head), i))
            .collect();
        Self { file, index }
    }

    pub fn select(&self, step: u64, layer: u32, head: u32) -> Result<&[PartitionId]> {
        self.index
            .get(&(step, layer, head))
            .map(|&i| self.file.records[i].sel.as_slice())
            .ok_or(Error::TraceExhausted { step, layer, head })
    }

    pub fn file(&self) -> &TraceFile {
        &self.file
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferPlan {
    pub copies: Vec<(HostPageId, DevicePageId)>,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestSpec {
    pub id: RequestId,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
    /// Seeds this request's synthetic selections.
    pub selection_seed: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementSummary {
    pub heads: u64,
    pub partitions: u64,
    pub host_pages: u64,
    pub device_pages: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RequestStepMetrics {
    pub request: RequestId,
    pub selected_partitions: u64,
    pub hits: u64,
    pub misses: u64,
    pub transferred_bytes: u64,
    /// Scoring plus KV bytes read for attention.
    pub hbm_bytes: f64,
    /// Scoring bytes alone.
    pub qk_bytes: f64,
    /// KV bytes of the selected partitions.
    pub selected_kv_bytes: f64,
    pub plans_with_copies: u64,
}

impl RequestStepMetrics {
    fn add(&mut self, other: &RequestStepMetrics) {
        self.selected_partitions += other.selected_partitions;
        self.hits += other.hits;
        self.misses += other.misses;
        self.transferred_bytes += other.transferred_bytes;
        self.hbm_bytes += other.hbm_bytes;
        self.qk_bytes += other.qk_bytes;
        self.selected_kv_bytes += other.selected_kv_bytes;
        self.plans_with_copies += other.plans_with_copies;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub requests: Vec<RequestStepMetrics>,
    pub hbm_bytes: f64,
    pub transferred_bytes: u64,
    pub plans_with_copies: u64,
    pub step_time_s: f64,
    /// Transferred over selected KV bytes.
    pub rho: f64,
}

impl StepMetrics {
    pub fn from_requests(step: u64, requests: Vec<RequestStepMetrics>, tiers: &TierParams) -> Self {
        let mut total = RequestStepMetrics::default();
        for r in &requests {
            total.add(r);
        }
        Self {
            step,
            hbm_bytes: total.hbm_bytes,
            transferred_bytes: total.transferred_bytes,
            plans_with_copies: total.plans_with_copies,
            step_time_s: step_time(
                total.hbm_bytes,
                total.transferred_bytes,
                total.plans_with_copies,
                tiers,
            ),
            rho: if total.selected_kv_bytes > 0.0 {
                total.transferred_bytes as f64 / total.selected_kv_bytes
            } else {
                0.0
            },
            requests,
        }
    }

    pub fn hits(&self) -> u64 {
        self.requests.iter().map(|r| r.hits).sum()
    }

    pub fn misses(&self) -> u64 {
        self.requests.iter().map(|r| r.misses).sum()
    }
}

/// `hbm/B_HBM + transferred/B_PCIe + latency·plans + T_MLP`.
pub fn step_time(hbm_bytes: f64, transferred_bytes: u64, plans: u64, tiers: &TierParams) -> f64 {
    hbm_bytes / tiers.bw_hbm
        + transferred_bytes as f64 / tiers.bw_pcie
        + tiers.per_transfer_latency * plans as f64
        + tiers.t_mlp
}

#[derive(Debug, Clone)]
struct HeadState {
    key: HeadKey,
    stream: Option<SelectionStream>,
}

#[derive(Debug, Clone)]
struct RequestState {
    spec: RequestSpec,
    /// Tokens covered by registered partitions.
    indexed_tokens: u64,
    /// Generated tokens not yet partitioned; device-resident.
    residual_tokens: u64,
    generated: u64,
    pinned_tokens: u64,
    pattern_pos: usize,
    heads: Vec<HeadState>,
}

impl RequestState {
    fn context(&self) -> u64 {
        self.indexed_tokens + self.residual_tokens
    }
}

/// Per-request selections, one list per head in key order.
pub type Selections = Vec<Vec<PartitionId>>;

#[derive(Debug, Clone)]
pub struct Pipeline {
    model: ModelShape,
    sparse: SparseConfig,
    tiers: TierParams,
    replacement: ReplacementParams,
    index: IndexParams,
    selector: SelectorConfig,
    playback: Option<TracePlayback>,
    store: MetadataStore,
    requests: BTreeMap<RequestId, RequestState>,
}

impl Pipeline {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: ModelShape,
        sparse: SparseConfig,
        tiers: TierParams,
        metadata: MetadataConfig,
        replacement: ReplacementParams,
        index: IndexParams,
        selector: SelectorConfig,
        playback: Option<TracePlayback>,
    ) -> Result<Self> {
        replacement.validate()?;
        if selector == SelectorConfig::TracePlayback && playback.is_none() {
            return Err(Error::InvalidSpecParams(
                "trace playback selected but no trace supplied".into(),
            ));
        }
        let store = MetadataStore::new(&model, &sparse, &tiers, &metadata, replacement.n_buckets);
        Ok(Self {
            model,
            sparse,
            tiers,
            replacement,
            index,
            selector,
            playback,
            store,
            requests: BTreeMap::new(),
        })
    }

    pub fn store(&self) -> &MetadataStore {
        &self.store
    }

    pub fn model(&self) -> &ModelShape {
        &self.model
    }

    pub fn sparse(&self) -> &SparseConfig {
        &self.sparse
    }

    pub fn tiers(&self) -> &TierParams {
        &self.tiers
    }

    pub fn page_bytes(&self) -> u64 {
        page_bytes(&self.model, &self.sparse)
    }

    /// Device pages available to each head lane.
    pub fn device_pages_per_lane(&self) -> u64 {
        self.store.device_pages_limit() / self.model.heads_per_request()
    }

    fn keys(&self, id: RequestId) -> Vec<HeadKey> {
        let mut keys = Vec::with_capacity(self.model.heads_per_request() as usize);
        for layer in 0..self.model.num_layers {
            for head in 0..self.model.num_kv_heads {
                keys.push(HeadKey {
                    request: id,
                    layer,
                    head,
                });
            }
        }
        keys
    }

    fn state(&self, id: RequestId) -> Result<&RequestState> {
        self.requests
            .get(&id)
            .ok_or(Error::UnknownHead(HeadKey {
                request: id,
                layer: 0,
                head: 0,
            }))
    }

    fn state_mut(&mut self, id: RequestId) -> Result<&mut RequestState> {
        self.requests
            .get_mut(&id)
            .ok_or(Error::UnknownHead(HeadKey {
                request: id,
                layer: 0,
                head: 0,
            }))
    }

    pub fn contains(&self, id: RequestId) -> bool {
        self.requests.contains_key(&id)
    }

    pub fn context_tokens(&self, id: RequestId) -> Result<u64> {
        Ok(self.state(id)?.context())
    }

    /// Generated tokens not yet cut into partitions.
    pub fn residual_tokens(&self, id: RequestId) -> Result<u64> {
        Ok(self.state(id)?.residual_tokens)
    }

    pub fn generated(&self, id: RequestId) -> Result<u64> {
        Ok(self.state(id)?.generated)
    }

    pub fn is_finished(&self, id: RequestId) -> Result<bool> {
        let s = self.state(id)?;
        Ok(s.generated >= s.spec.output_tokens)
    }

    /// Selection budget in partitions at the given context.
    fn budget_partitions(&self, context: u64, selectable: usize) -> usize {
        let b = match self.sparse.partition_granularity {
            Granularity::Fixed(_) => self.sparse.budget_partitions(context).unwrap_or(0),
            Granularity::Variable => {
                let mean = self.index.variable_pattern.iter().sum::<u64>() as f64
                    / self.index.variable_pattern.len() as f64;
                (self.sparse.budget_tokens(context) / mean).ceil() as u64
            }
        };
        (b as usize).min(selectable)
    }

    /// Pages a head needs on its first step at `context` tokens: pinned
    /// pages plus a full budget of the largest partitions.
    pub fn estimate_mandatory(&self, context: u64) -> Result<u64> {
        let spec = prefill_index(context, self.model.max_context, &self.sparse, &self.index)?;
        let counts = spec.token_counts()?;
        let pinned: u64 = spec
            .pinned
            .iter()
            .map(|&i| self.store.page_count(counts[i as usize]))
            .sum();
        let per_partition = match self.sparse.partition_granularity {
            Granularity::Fixed(g) => g.div_ceil(self.sparse.page_size),
            Granularity::Variable => self
                .index
                .variable_pattern
                .iter()
                .map(|&t| t.div_ceil(self.sparse.page_size))
                .max()
                .unwrap_or(1),
        };
        let selectable = counts.len() - spec.pinned.len();
        let budget = match self.selector {
            SelectorConfig::TracePlayback => self
                .playback
                .as_ref()
                .map_or(0, |p| p.file().budget)
                .min(selectable),
            SelectorConfig::Synthetic { .. } => self.budget_partitions(context, selectable),
        };
        Ok(pinned + budget as u64 * per_partition)
    }

    /// Index and offload a prompt for every head of the request.
    pub fn offload(&mut self, spec: RequestSpec) -> Result<PlacementSummary> {
        if self.requests.contains_key(&spec.id) {
            return Err(Error::InvalidSpecParams(format!(
                "request {} already offloaded",
                spec.id
            )));
        }
        let pspec = prefill_index(
            spec.prompt_tokens,
            self.model.max_context,
            &self.sparse,
            &self.index,
        )?;
        let counts = pspec.token_counts()?;
        let pages: Vec<u64> = counts.iter().map(|&c| self.store.page_count(c)).collect();
        let heads = self.model.heads_per_request();
        let host_per_head: u64 = (0..pages.len())
            .filter(|i| !pspec.pinned.contains(&(*i as u32)))
            .map(|i| pages[i])
            .sum();
        let device_per_head: u64 = pspec.pinned.iter().map(|&i| pages[i as usize]).sum();
        if host_per_head * heads > self.store.host_pages_free() {
            return Err(Error::HostCapacityExceeded {
                needed: host_per_head * heads,
                available: self.store.host_pages_free(),
            });
        }
        let device_free = self.store.device_pages_limit() - self.store.device_pages_used();
        if device_per_head * heads > device_free {
            return Err(Error::DeviceCapacityExceeded {
                needed: device_per_head * heads,
                available: device_free,
            });
        }
        let keys = self.keys(spec.id);
        let mut head_states = Vec::with_capacity(keys.len());
        for key in keys {
            if !counts.is_empty() {
                self.store.register_partitions(key, &pspec)?;
            }
            head_states.push(HeadState { key, stream: None });
        }
        let pinned_tokens = pspec.pinned.iter().map(|&i| counts[i as usize]).sum();
        let selectable: Vec<PartitionId> = (0..counts.len() as u32)
            .filter(|i| !pspec.pinned.contains(i))
            .collect();
        if let SelectorConfig::Synthetic {
            reuse_fraction,
            zipf_s,
        } = self.selector
        {
            let budget = self.budget_partitions(spec.prompt_tokens, selectable.len());
            for h in &mut head_states {
                let model = LocalityModel {
                    reuse_fraction,
                    zipf_s,
                    budget,
                    seed: spec.selection_seed,
                };
                let rng = sub_rng(
                    spec.selection_seed,
                    &[h.key.layer as u64, h.key.head as u64],
                );
                h.stream = Some(SelectionStream::new(&model, selectable.clone(), rng)?);
            }
        }
        self.requests.insert(
            spec.id,
            RequestState {
                spec,
                indexed_tokens: spec.prompt_tokens,
                residual_tokens: 0,
                generated: 0,
                pinned_tokens,
                pattern_pos: counts.len(),
                heads: head_states,
            },
        );
        Ok(PlacementSummary {
            heads: if counts.is_empty() { 0 } else { heads },
            partitions: counts.len() as u64 * heads,
            host_pages: host_per_head * heads,
            device_pages: if counts.is_empty() {
                0
            } else {
                device_per_head * heads
            },
        })
    }

    /// Partitions selected for one head at the request's current step.
    pub fn select(&mut self, id: RequestId, head_index: usize) -> Result<Vec<PartitionId>> {
        let step = self.state(id)?.generated;
        let variable = self.sparse.partition_granularity == Granularity::Variable;
        let target = self.sparse.budget_tokens(self.state(id)?.context());
        match self.selector {
            SelectorConfig::TracePlayback => {
                let key = self.state(id)?.heads[head_index].key;
                let playback = self.playback.as_ref().expect("checked in new");
                Ok(playback.select(step, key.layer, key.head)?.to_vec())
            }
            SelectorConfig::Synthetic { .. } => {
                let state = self.requests.get_mut(&id).expect("checked above");
                let h = &mut state.heads[head_index];
                let Some(stream) = h.stream.as_mut() else {
                    return Ok(Vec::new());
                };
                let mut sel = stream.next_step();
                if variable {
                    // Top up in id order until the token budget is met.
                    let info = self.store.lookup_meta(&h.key, &sel)?;
                    let mut tokens: u64 = info.iter().map(|i| i.token_count).sum();
                    let chosen: HashSet<PartitionId> = sel.iter().copied().collect();
                    for &id in stream.ids() {
                        if tokens as f64 >= target {
                            break;
                        }
                        if !chosen.contains(&id) {
                            tokens += self.store.lookup_meta(&h.key, &[id])?[0].token_count;
                            sel.push(id);
                        }
                    }
                    sel.sort_unstable();
                }
                Ok(sel)
            }
        }
    }

    /// Selections for every head of a request.
    pub fn select_request(&mut self, id: RequestId) -> Result<Selections> {
        let n = self.state(id)?.heads.len();
        (0..n).map(|h| self.select(id, h)).collect()
    }

    /// Pinned plus selected pages, maximised over heads.
    pub fn mandatory_pages(&self, id: RequestId, selections: &Selections) -> Result<u64> {
        let s = self.state(id)?;
        let mut worst = 0;
        for (h, sel) in s.heads.iter().zip(selections) {
            let pinned = self.store.head(&h.key)?.pinned_pages() as u64;
            let pinned_ids: HashSet<PartitionId> =
                self.store.head(&h.key)?.pinned_ids().iter().copied().collect();
            let unpinned: Vec<PartitionId> = sel
                .iter()
                .copied()
                .filter(|p| !pinned_ids.contains(p))
                .collect::<HashSet<_>>()
                .into_iter()
                .collect();
            let pages: u64 = self
                .store
                .lookup_meta(&h.key, &unpinned)?
                .iter()
                .map(|i| i.page_count)
                .sum();
            worst = worst.max(pinned + pages);
        }
        Ok(worst)
    }

    /// Device pages currently held by each head of the request.
    pub fn capacity(&self, id: RequestId) -> Result<u64> {
        let s = self.state(id)?;
        match s.heads.first() {
            Some(h) => match self.store.head(&h.key) {
                Ok(t) => Ok(t.device_capacity() as u64),
                Err(_) => Ok(0),
            },
            None => Ok(0),
        }
    }

    /// Pinned pages per head.
    pub fn pinned_pages(&self, id: RequestId) -> Result<u64> {
        let s = self.state(id)?;
        match s.heads.first().map(|h| self.store.head(&h.key)) {
            Some(Ok(t)) => Ok(t.pinned_pages() as u64),
            _ => Ok(0),
        }
    }

    /// Sets every head's device capacity, clamped to the per-head maximum.
    /// Shrinking cuts the page table tail; partitions in `protect` (per head)
    /// and pinned ones survive.
    pub fn set_capacity(
        &mut self,
        id: RequestId,
        pages: u64,
        protect: Option<&Selections>,
    ) -> Result<u64> {
        let keys: Vec<HeadKey> = self.state(id)?.heads.iter().map(|h| h.key).collect();
        let pages = pages.min(self.store.layout().max_device_pages_per_head);
        let mut evicted = 0;
        for (i, key) in keys.iter().enumerate() {
            if self.store.head(key).is_err() {
                continue;
            }
            let cap = self.store.head(key)?.device_capacity() as u64;
            if pages > cap {
                self.store.grow_device(key, pages as u32)?;
            } else if pages < cap {
                let protected: HashSet<PartitionId> = protect
                    .and_then(|p| p.get(i))
                    .map(|s| s.iter().copied().collect())
                    .unwrap_or_default();
                evicted += self.store.shrink_device(key, pages as u32, &protected)?.len() as u64;
            }
        }
        Ok(evicted)
    }

    /// Brings `ids` onto the device for one head and plans the copies.
    pub fn retrieve(
        &mut self,
        key: &HeadKey,
        ids: &[PartitionId],
        step: u64,
    ) -> Result<(ReplacementOutcome, TransferPlan)> {
        let outcome = self.store.replace(key, ids, step, &self.replacement)?;
        let mut plan = TransferPlan::default();
        for (pid, dst) in &outcome.admissions {
            let src = self.store.cpu_pages_of(key, *pid)?;
            if src.len() != dst.len() {
                return Err(Error::Invariant(format!(
                    "partition {pid}: {} host pages but {} device pages",
                    src.len(),
                    dst.len()
                )));
            }
            plan.copies.extend(src.into_iter().zip(dst.iter().copied()));
        }
        plan.bytes = plan.copies.len() as u64 * self.page_bytes();
        Ok((outcome, plan))
    }

    /// Runs retrieval for every head of a request with the given selections
    /// and accounts the bytes read and moved.
    pub fn execute(&mut self, id: RequestId, selections: &Selections) -> Result<RequestStepMetrics> {
        let (step, context, pinned_tokens, residual, keys) = {
            let s = self.state(id)?;
            (
                s.generated,
                s.context(),
                s.pinned_tokens,
                s.residual_tokens,
                s.heads.iter().map(|h| h.key).collect::<Vec<_>>(),
            )
        };
        let per_token = self.model.kv_bytes_per_token();
        let qk_per_head = (context * self.model.head_dim as u64 * self.model.bytes_per_element as u64)
            as f64
            * self.sparse.summary_ratio;
        let mut m = RequestStepMetrics {
            request: id,
            ..Default::default()
        };
        for (key, sel) in keys.iter().zip(selections) {
            if self.store.head(key).is_err() {
                continue;
            }
            let pinned: HashSet<PartitionId> =
                self.store.head(key)?.pinned_ids().iter().copied().collect();
            let mut seen = HashSet::new();
            let requested: Vec<PartitionId> = sel
                .iter()
                .copied()
                .filter(|p| !pinned.contains(p) && seen.insert(*p))
                .collect();
            let (outcome, plan) = self.retrieve(key, &requested, step)?;
            let tokens: u64 = self
                .store
                .lookup_meta(key, &requested)?
                .iter()
                .map(|i| i.token_count)
                .sum();
            let selected_kv = (tokens * per_token) as f64;
            m.selected_partitions += requested.len() as u64;
            m.hits += outcome.hits.len() as u64;
            m.misses += outcome.misses() as u64;
            m.transferred_bytes += plan.bytes;
            m.plans_with_copies += u64::from(!plan.copies.is_empty());
            m.qk_bytes += qk_per_head;
            m.selected_kv_bytes += selected_kv;
            m.hbm_bytes +=
                qk_per_head + selected_kv + ((pinned_tokens + residual) * per_token) as f64;
        }
        Ok(m)
    }

    /// Select and retrieve for a batch whose capacities already cover the
    /// step, then price the step.
    pub fn decode_step(&mut self, batch: &[RequestId], step: u64) -> Result<StepMetrics> {
        let mut per_request = Vec::with_capacity(batch.len());
        for &id in batch {
            let sel = self.select_request(id)?;
            per_request.push(self.execute(id, &sel)?);
        }
        Ok(StepMetrics::from_requests(step, per_request, &self.tiers))
    }

    /// Drops every cached partition of the request, keeping pinned ones.
    pub fn invalidate(&mut self, id: RequestId) -> Result<()> {
        let keys: Vec<HeadKey> = self.state(id)?.heads.iter().map(|h| h.key).collect();
        for key in keys {
            if self.store.head(&key).is_ok() {
                self.store.invalidate_unpinned(&key)?;
            }
        }
        Ok(())
    }

    /// Records `new_tokens` generated tokens. At an update boundary, or when
    /// the request finishes, full partitions are cut from the residual window
    /// and offloaded. Returns the number of new partitions per head.
    pub fn append_tokens(&mut self, id: RequestId, new_tokens: u64) -> Result<u64> {
        let interval = self.sparse.update_interval;
        let (boundary, start, residual, pos) = {
            let s = self.state_mut(id)?;
            s.generated += new_tokens;
            s.residual_tokens += new_tokens;
            let boundary = s.generated % interval == 0 || s.generated >= s.spec.output_tokens;
            (boundary, s.indexed_tokens, s.residual_tokens, s.pattern_pos)
        };
        if !boundary {
            return Ok(0);
        }
        let (spec, used) = match self.sparse.partition_granularity {
            Granularity::Fixed(g) => {
                let n = residual / g;
                (PartitionSpec::uniform(start, start + n * g, g), n * g)
            }
            Granularity::Variable => {
                let pattern = &self.index.variable_pattern;
                let mut ranges = Vec::new();
                let mut at = start;
                let mut p = pos;
                loop {
                    let size = pattern[p % pattern.len()];
                    if at + size > start + residual {
                        break;
                    }
                    ranges.push(at..at + size);
                    at += size;
                    p += 1;
                }
                let used = at - start;
                let mut spec = PartitionSpec::variable(ranges);
                spec.start = start;
                spec.end = start + used;
                (spec, used)
            }
        };
        let n = spec.len() as u64;
        if n == 0 {
            return Ok(0);
        }
        let keys: Vec<HeadKey> = self.state(id)?.heads.iter().map(|h| h.key).collect();
        let pages_per_head: u64 = spec
            .token_counts()?
            .iter()
            .map(|&c| self.store.page_count(c))
            .sum();
        let needed = pages_per_head * keys.len() as u64;
        if needed > self.store.host_pages_free() {
            return Err(Error::HostCapacityExceeded {
                needed,
                available: self.store.host_pages_free(),
            });
        }
        let mut new_ids = Vec::new();
        for key in &keys {
            new_ids = self.store.register_partitions(*key, &spec)?;
        }
        let context = {
            let s = self.state_mut(id)?;
            s.indexed_tokens += used;
            s.residual_tokens -= used;
            s.pattern_pos += n as usize;
            s.context()
        };
        if let SelectorConfig::Synthetic { zipf_s, .. } = self.selector {
            let selectable = {
                let key = keys[0];
                let h = self.store.head(&key)?;
                h.num_partitions() as usize - h.pinned_ids().len()
            };
            let budget = self.budget_partitions(context, selectable);
            let s = self.requests.get_mut(&id).expect("checked above");
            for h in &mut s.heads {
                if let Some(stream) = h.stream.as_mut() {
                    stream.extend(&new_ids, budget, zipf_s)?;
                }
            }
        }
        Ok(n)
    }

    /// Page count of every partition of a head, by id.
    pub fn page_counts(&self, key: &HeadKey) -> Result<Vec<u64>> {
        let n = self.store.head(key)?.num_partitions();
        let ids: Vec<PartitionId> = (0..n).collect();
        Ok(self
            .store
            .lookup_meta(key, &ids)?
            .iter()
            .map(|i| i.page_count)
            .collect())
    }

    pub fn head_keys(&self, id: RequestId) -> Result<Vec<HeadKey>> {
        Ok(self.state(id)?.heads.iter().map(|h| h.key).collect())
    }

    pub fn release(&mut self, id: RequestId) -> Result<()> {
        self.requests.remove(&id);
        self.store.release_request(id);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RetrievalBudget;
    use crate::metadata::Residency;
    use crate::replacement::EvictionMode;

    fn shadowkv() -> SparseConfig {
        SparseConfig {
            retrieval_budget: RetrievalBudget::Tokens(512),
            partition_granularity: Granularity::Fixed(8),
            page_size: 8,
            summary_ratio: 0.125,
            update_interval: 256,
        }
    }

    fn model(layers: u32, heads: u32) -> ModelShape {
        ModelShape {
            num_layers: layers,
            num_kv_heads: heads,
            head_dim: 128,
            bytes_per_element: 2,
            max_context: 65_536,
        }
    }

    fn tiers() -> TierParams {
        TierParams {
            device_capacity: 1 << 32,
            host_capacity: 1 << 36,
            bw_hbm: 2e12,
            bw_pcie: 32e9,
            t_mlp: 1e-3,
            per_transfer_latency: 0.0,
        }
    }

    fn pipeline(layers: u32, heads: u32, selector: SelectorConfig, index: IndexParams) -> Pipeline {
        Pipeline::new(
            model(layers, heads),
            shadowkv(),
            tiers(),
            MetadataConfig {
                max_batch: 4,
                ..Default::default()
            },
            ReplacementParams {
                n_buckets: 64,
                eviction_mode: EvictionMode::BucketExact,
            },
            index,
            selector,
            None,
        )
        .unwrap()
    }

    fn request(id: u64, prompt: u64) -> RequestSpec {
        RequestSpec {
            id: RequestId(id),
            prompt_tokens: prompt,
            output_tokens: 1000,
            selection_seed: 5,
        }
    }

    const SYN: SelectorConfig = SelectorConfig::Synthetic {
        reuse_fraction: 0.7,
        zipf_s: 0.8,
    };

    #[test]
    fn prefill_pins_outliers_and_window() {
        let p = IndexParams {
            outliers: 48,
            window: 64,
            ..Default::default()
        };
        let spec = prefill_index(32_768, 65_536, &shadowkv(), &p).unwrap();
        assert_eq!(spec.len(), 4096);
        assert_eq!(spec.pinned.len(), 112);
        let one = prefill_index(8, 65_536, &shadowkv(), &IndexParams { window: 1, ..p.clone() }).unwrap();
        assert_eq!((one.len(), one.pinned.len()), (1, 1));
        let none = prefill_index(8, 65_536, &shadowkv(), &IndexParams::default()).unwrap();
        assert!(none.pinned.is_empty());
        assert!(prefill_index(70_000, 65_536, &shadowkv(), &p).is_err());
    }

    #[test]
    fn variable_ranges_page_counts() {
        let spec = prefill_index_ranges(vec![0..100, 100..4096], &IndexParams::default()).unwrap();
        let pages: Vec<u64> = spec
            .token_counts()
            .unwrap()
            .iter()
            .map(|c| c.div_ceil(8))
            .collect();
        assert_eq!(pages, vec![13, 500]);
    }

    #[test]
    fn offload_registers_every_head() {
        let mut p = pipeline(36, 8, SYN, IndexParams::default());
        let s = p.offload(request(0, 32_768)).unwrap();
        assert_eq!(s.heads, 288);
        assert_eq!(s.partitions, 288 * 4096);
        assert_eq!(p.store().heads().count(), 288);
        let empty = p.offload(request(1, 0)).unwrap();
        assert_eq!(empty, PlacementSummary::default());
    }

    #[test]
    fn offload_beyond_host_capacity() {
        let mut t = tiers();
        t.host_capacity = 1 << 20;
        let mut p = Pipeline::new(
            model(1, 1),
            shadowkv(),
            t,
            MetadataConfig::default(),
            ReplacementParams::default(),
            IndexParams::default(),
            SYN,
            None,
        )
        .unwrap();
        assert!(matches!(
            p.offload(request(0, 32_768)),
            Err(Error::HostCapacityExceeded { .. })
        ));
    }

    #[test]
    fn full_reuse_selection_repeats() {
        let sel = SelectorConfig::Synthetic {
            reuse_fraction: 1.0,
            zipf_s: 0.8,
        };
        let mut p = pipeline(1, 1, sel, IndexParams::default());
        p.offload(request(0, 32_768)).unwrap();
        let a = p.select(RequestId(0), 0).unwrap();
        p.append_tokens(RequestId(0), 1).unwrap();
        let b = p.select(RequestId(0), 0).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(a, b);
    }

    #[test]
    fn miss_bytes_follow_plan_formula() {
        let mut p = pipeline(1, 1, SYN, IndexParams::default());
        p.offload(request(0, 32_768)).unwrap();
        let key = HeadKey::new(0, 0, 0);
        p.set_capacity(RequestId(0), 64, None).unwrap();
        let ids: Vec<u32> = (0..48).collect();
        let (outcome, plan) = p.retrieve(&key, &ids, 0).unwrap();
        assert_eq!(plan.bytes, 48 * 8 * 128 * 2 * 2);
        assert_eq!(plan.bytes, 196_608);
        let dests: Vec<u32> = plan.copies.iter().map(|c| c.1).collect();
        let admitted: Vec<u32> = outcome.admissions.iter().flat_map(|a| a.1.clone()).collect();
        assert_eq!(dests, admitted);
        let (_, again) = p.retrieve(&key, &ids, 1).unwrap();
        assert_eq!(again.bytes, 0);
    }

    #[test]
    fn all_hit_step_costs_hbm_plus_mlp() {
        let mut p = pipeline(1, 1, SelectorConfig::Synthetic { reuse_fraction: 1.0, zipf_s: 0.8 }, IndexParams::default());
        p.offload(request(0, 32_768)).unwrap();
        p.set_capacity(RequestId(0), 64, None).unwrap();
        p.decode_step(&[RequestId(0)], 0).unwrap();
        p.append_tokens(RequestId(0), 1).unwrap();
        let m = p.decode_step(&[RequestId(0)], 1).unwrap();
        assert_eq!(m.transferred_bytes, 0);
        assert_eq!(m.rho, 0.0);
        assert_eq!(m.step_time_s, m.hbm_bytes / 2e12 + 0.0 + 1e-3);
    }

    #[test]
    fn cold_start_rho_excludes_pinned() {
        let idx = IndexParams {
            outliers: 48,
            window: 64,
            ..Default::default()
        };
        let mut p = pipeline(1, 1, SYN, idx);
        p.offload(request(0, 32_768)).unwrap();
        let m0 = p.estimate_mandatory(32_768).unwrap();
        assert_eq!(m0, 112 + 64);
        p.set_capacity(RequestId(0), m0, None).unwrap();
        let m = p.decode_step(&[RequestId(0)], 0).unwrap();
        assert_eq!(m.misses(), 64);
        assert!((m.rho - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_identical_requests_double_transfers() {
        let run = |n: u64| {
            let mut p = pipeline(2, 2, SYN, IndexParams::default());
            let ids: Vec<RequestId> = (0..n).map(RequestId).collect();
            for &id in &ids {
                p.offload(request(id.0, 16_384)).unwrap();
                p.set_capacity(id, 128, None).unwrap();
            }
            let mut total = 0;
            for step in 0..20 {
                total += p.decode_step(&ids, step).unwrap().transferred_bytes;
                for &id in &ids {
                    p.append_tokens(id, 1).unwrap();
                }
            }
            total
        };
        assert_eq!(run(2), 2 * run(1));
    }

    #[test]
    fn append_cuts_partitions_at_update_boundary() {
        let mut p = pipeline(1, 1, SYN, IndexParams::default());
        let id = RequestId(0);
        p.offload(request(0, 1024)).unwrap();
        let mut made = 0;
        for _ in 0..255 {
            made += p.append_tokens(id, 1).unwrap();
        }
        assert_eq!(made, 0);
        assert_eq!(p.append_tokens(id, 1).unwrap(), 32);
        assert_eq!(p.context_tokens(id).unwrap(), 1024 + 256);
        let key = HeadKey::new(0, 0, 0);
        assert_eq!(p.store().head(&key).unwrap().num_partitions(), 128 + 32);
        let info = p.store().lookup_meta(&key, &[128]).unwrap();
        assert_eq!(info[0].residency, Residency::HostOnly);
    }

    #[test]
    fn short_update_keeps_residual() {
        let mut p = pipeline(1, 1, SYN, IndexParams::default());
        let id = RequestId(0);
        let spec = RequestSpec {
            output_tokens: 5,
            ..request(0, 1024)
        };
        p.offload(spec).unwrap();
        let mut made = 0;
        for _ in 0..5 {
            made += p.append_tokens(id, 1).unwrap();
        }
        assert_eq!(made, 0);
        assert_eq!(p.context_tokens(id).unwrap(), 1029);
    }

    #[test]
    fn append_beyond_host_capacity() {
        let mut t = tiers();
        t.host_capacity = 4096 * 130;
        let mut p = Pipeline::new(
            model(1, 1),
            shadowkv(),
            t,
            MetadataConfig::default(),
            ReplacementParams::default(),
            IndexParams::default(),
            SYN,
            None,
        )
        .unwrap();
        let id = RequestId(0);
        p.offload(request(0, 1024)).unwrap();
        for _ in 0..255 {
            p.append_tokens(id, 1).unwrap();
        }
        assert!(matches!(
            p.append_tokens(id, 1),
            Err(Error::HostCapacityExceeded { .. })
        ));
    }

    #[test]
    fn playback_reports_exhaustion() {
        let file = TraceFile::single_head(4096, 2, &[vec![1, 2]]);
        let mut p = Pipeline::new(
            model(1, 1),
            shadowkv(),
            tiers(),
            MetadataConfig::default(),
            ReplacementParams::default(),
            IndexParams::default(),
            SelectorConfig::TracePlayback,
            Some(TracePlayback::new(file)),
        )
        .unwrap();
        p.offload(request(0, 32_768)).unwrap();
        assert_eq!(p.select(RequestId(0), 0).unwrap(), vec![1, 2]);
        p.append_tokens(RequestId(0), 1).unwrap();
        assert_eq!(
            p.select(RequestId(0), 0),
            Err(Error::TraceExhausted {
                step: 1,
                layer: 0,
                head: 0
            })
        );
    }
}
