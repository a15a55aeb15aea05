//! Shared domain types and configuration validation.
//!
//! Token, page and byte counts are `u64`. Every division that turns tokens
//! into pages or partitions rounds up.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Partition index within one head's KV stream.
pub type PartitionId = u32;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestId(pub u64);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// One independently managed KV stream: a (request, layer, KV head) triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadKey {
    pub request: RequestId,
    pub layer: u32,
    pub head: u32,
}

impl HeadKey {
    pub fn new(request: u64, layer: u32, head: u32) -> Self {
        Self {
            request: RequestId(request),
            layer,
            head,
        }
    }
}

impl fmt::Display for HeadKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/l{}/h{}", self.request, self.layer, self.head)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub num_layers: u32,
    pub num_kv_heads: u32,
    pub head_dim: u32,
    pub bytes_per_element: u32,
    pub max_context: u64,
}

impl ModelShape {
    pub fn heads_per_request(&self) -> u64 {
        self.num_layers as u64 * self.num_kv_heads as u64
    }

    /// Bytes of K plus V for one token of one head.
    pub fn kv_bytes_per_token(&self) -> u64 {
        2 * self.head_dim as u64 * self.bytes_per_element as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalBudget {
    /// Fraction of the current context, in tokens.
    Fraction(f64),
    /// Fixed token count regardless of context length.
    Tokens(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Fixed(u64),
    Variable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseConfig {
    pub retrieval_budget: RetrievalBudget,
    pub partition_granularity: Granularity,
    pub page_size: u64,
    pub summary_ratio: f64,
    pub update_interval: u64,
}

impl SparseConfig {
    pub fn pages_for_tokens(&self, tokens: u64) -> u64 {
        tokens.div_ceil(self.page_size)
    }

    /// Tokens selected per step for a head whose context is `context` tokens.
    pub fn budget_tokens(&self, context: u64) -> f64 {
        match self.retrieval_budget {
            RetrievalBudget::Fraction(beta) => beta * context as f64,
            RetrievalBudget::Tokens(t) => t as f64,
        }
    }

    /// Partitions selected per step under fixed granularity: `ceil(budget_tokens / g)`.
    /// Returns `None` for variable granularity, where selection is token-driven.
    pub fn budget_partitions(&self, context: u64) -> Option<u64> {
        match self.partition_granularity {
            Granularity::Fixed(g) => Some((self.budget_tokens(context) / g as f64).ceil() as u64),
            Granularity::Variable => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierParams {
    pub device_capacity: u64,
    pub host_capacity: u64,
    pub bw_hbm: f64,
    pub bw_pcie: f64,
    pub t_mlp: f64,
    #[serde(default)]
    pub per_transfer_latency: f64,
}

/// Bytes moved per physical page of one head (K and V).
pub fn page_bytes(model: &ModelShape, sparse: &SparseConfig) -> u64 {
    sparse.page_size * model.kv_bytes_per_token()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    ZeroField(&'static str),
    BytesPerElement(u32),
    PageSize,
    Granularity,
    SummaryRatio(f64),
    BudgetFraction(f64),
    BudgetBelowOneToken,
    BudgetBelowGranularity,
    UpdateInterval,
    Bandwidths,
    DeviceCapacity,
    HostCapacity,
    NegativeTime(&'static str),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ZeroField(name) => write!(f, "{name} must be >= 1"),
            Violation::BytesPerElement(e) => write!(f, "bytes_per_element {e} not in {{1, 2, 4}}"),
            Violation::PageSize => f.write_str("page_size must be >= 1"),
            Violation::Granularity => f.write_str("partition_granularity must be >= 1"),
            Violation::SummaryRatio(a) => write!(f, "summary_ratio {a} not in [0, 1)"),
            Violation::BudgetFraction(b) => write!(f, "retrieval_budget fraction {b} not in (0, 1]"),
            Violation::BudgetBelowOneToken => f.write_str("budget below one token at max_context"),
            Violation::BudgetBelowGranularity => f.write_str("budget < granularity"),
            Violation::UpdateInterval => f.write_str("update_interval must be >= 1"),
            Violation::Bandwidths => f.write_str("require bw_hbm > bw_pcie > 0"),
            Violation::DeviceCapacity => f.write_str("device_capacity must be > 0"),
            Violation::HostCapacity => f.write_str("host_capacity must be > 0"),
            Violation::NegativeTime(name) => write!(f, "{name} must be a finite value >= 0"),
        }
    }
}

/// Checks every invariant of the three core sections and reports all that fail.
///
/// Pure; returns the inputs unchanged on success.
pub fn validate_config(
    model: ModelShape,
    sparse: SparseConfig,
    tiers: TierParams,
) -> Result<(ModelShape, SparseConfig, TierParams)> {
    let mut v = Vec::new();

    for (name, value) in [
        ("num_layers", model.num_layers as u64),
        ("num_kv_heads", model.num_kv_heads as u64),
        ("head_dim", model.head_dim as u64),
        ("max_context", model.max_context),
    ] {
        if value == 0 {
            v.push(Violation::ZeroField(name));
        }
    }
    if !matches!(model.bytes_per_element, 1 | 2 | 4) {
        v.push(Violation::BytesPerElement(model.bytes_per_element));
    }

    if sparse.page_size == 0 {
        v.push(Violation::PageSize);
    }
    if sparse.partition_granularity == Granularity::Fixed(0) {
        v.push(Violation::Granularity);
    }
    if !(0.0..1.0).contains(&sparse.summary_ratio) {
        v.push(Violation::SummaryRatio(sparse.summary_ratio));
    }
    if sparse.update_interval == 0 {
        v.push(Violation::UpdateInterval);
    }
    match sparse.retrieval_budget {
        RetrievalBudget::Fraction(beta) if !(beta > 0.0 && beta <= 1.0) => {
            v.push(Violation::BudgetFraction(beta));
        }
        RetrievalBudget::Tokens(0) => v.push(Violation::ZeroField("retrieval_budget tokens")),
        _ => {
            let budget = sparse.budget_tokens(model.max_context);
            if budget < 1.0 {
                v.push(Violation::BudgetBelowOneToken);
            }
            if let Granularity::Fixed(g) = sparse.partition_granularity {
                if g > 0 && budget < g as f64 {
                    v.push(Violation::BudgetBelowGranularity);
                }
            }
        }
    }

    if !(tiers.bw_pcie > 0.0 && tiers.bw_hbm > tiers.bw_pcie) {
        v.push(Violation::Bandwidths);
    }
    if tiers.device_capacity == 0 {
        v.push(Violation::DeviceCapacity);
    }
    if tiers.host_capacity == 0 {
        v.push(Violation::HostCapacity);
    }
    for (name, t) in [
        ("t_mlp", tiers.t_mlp),
        ("per_transfer_latency", tiers.per_transfer_latency),
    ] {
        if !(t.is_finite() && t >= 0.0) {
            v.push(Violation::NegativeTime(name));
        }
    }

    if v.is_empty() {
        Ok((model, sparse, tiers))
    } else {
        Err(Error::InvalidConfig(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn qwen3_8b() -> ModelShape {
        ModelShape {
            num_layers: 36,
            num_kv_heads: 8,
            head_dim: 128,
            bytes_per_element: 2,
            max_context: 131_072,
        }
    }

    fn shadowkv() -> SparseConfig {
        SparseConfig {
            retrieval_budget: RetrievalBudget::Fraction(0.0156),
            partition_granularity: Granularity::Fixed(8),
            page_size: 8,
            summary_ratio: 0.125,
            update_interval: 256,
        }
    }

    fn tiers() -> TierParams {
        TierParams {
            device_capacity: 40 << 30,
            host_capacity: 512 << 30,
            bw_hbm: 2.0e12,
            bw_pcie: 32e9,
            t_mlp: 5e-3,
            per_transfer_latency: 0.0,
        }
    }

    fn violations(res: Result<(ModelShape, SparseConfig, TierParams)>) -> Vec<Violation> {
        match res {
            Err(Error::InvalidConfig(v)) => v,
            other => panic!("expected InvalidConfig, got {other:?}"),
        }
    }

    #[test]
    fn shadowkv_on_qwen3_is_valid() {
        let out = validate_config(qwen3_8b(), shadowkv(), tiers()).unwrap();
        assert_eq!(out, (qwen3_8b(), shadowkv(), tiers()));
    }

    #[test]
    fn zero_page_size_is_reported() {
        let mut sparse = shadowkv();
        sparse.page_size = 0;
        assert_eq!(
            violations(validate_config(qwen3_8b(), sparse, tiers())),
            vec![Violation::PageSize]
        );
    }

    #[test]
    fn tiny_context_budget_below_granularity() {
        let mut model = qwen3_8b();
        model.max_context = 32;
        let v = violations(validate_config(model, shadowkv(), tiers()));
        assert!(v.contains(&Violation::BudgetBelowGranularity));
    }

    #[test]
    fn all_violations_are_collected() {
        let model = ModelShape {
            num_layers: 0,
            bytes_per_element: 3,
            ..qwen3_8b()
        };
        let mut t = tiers();
        t.bw_pcie = t.bw_hbm * 2.0;
        let v = violations(validate_config(model, shadowkv(), t));
        assert_eq!(v.len(), 3, "{v:?}");
    }

    #[test]
    fn validation_is_idempotent() {
        let once = validate_config(qwen3_8b(), shadowkv(), tiers()).unwrap();
        let twice = validate_config(once.0, once.1, once.2).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn fractional_budget_rounds_up_to_partitions() {
        assert_eq!(shadowkv().budget_partitions(32_768), Some(64));
        assert_eq!(shadowkv().budget_partitions(131_072), Some(256));
    }
}
