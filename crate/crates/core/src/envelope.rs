//! Closed-form decode cost of an ideal sparse-serving system.
//!
//! Byte volumes are formed as exact integers before the fractional factors
//! are applied.

use serde::{Deserialize, Serialize};

use crate::config::{page_bytes, ModelShape, SparseConfig};
use crate::error::{Error, Result};
use crate::oracle::{belady, AccessTrace};

/// Full KV cache size: `2·B·L·H·d·e·N`.
pub fn kv_bytes(shape: &ModelShape, context: u64, batch: u64) -> u128 {
    2 * batch as u128
        * shape.num_layers as u128
        * shape.num_kv_heads as u128
        * shape.head_dim as u128
        * shape.bytes_per_element as u128
        * context as u128
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeParams {
    pub batch: u64,
    pub num_layers: u32,
    pub num_kv_heads: u32,
    pub head_dim: u32,
    pub bytes_per_element: u32,
    pub context: u64,
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub bw_hbm: f64,
    pub bw_pcie: f64,
    pub t_mlp: f64,
}

impl EnvelopeParams {
    pub fn from_shape(shape: &ModelShape, context: u64, batch: u64) -> Self {
        Self {
            batch,
            num_layers: shape.num_layers,
            num_kv_heads: shape.num_kv_heads,
            head_dim: shape.head_dim,
            bytes_per_element: shape.bytes_per_element,
            context,
            alpha: 0.0,
            beta: 0.0,
            rho: 0.0,
            bw_hbm: 1.0,
            bw_pcie: 1.0,
            t_mlp: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let frac = |x: f64| (0.0..=1.0).contains(&x);
        let ok = frac(self.alpha)
            && frac(self.beta)
            && frac(self.rho)
            && self.bw_hbm > 0.0
            && self.bw_pcie > 0.0
            && self.t_mlp.is_finite()
            && self.t_mlp >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSpecParams(format!(
                "envelope parameters out of range: {self:?}"
            )))
        }
    }

    /// `B·L·H·d·e·N` as an exact integer.
    fn unit_bytes(&self) -> u128 {
        self.batch as u128
            * self.num_layers as u128
            * self.num_kv_heads as u128
            * self.head_dim as u128
            * self.bytes_per_element as u128
            * self.context as u128
    }

    pub fn qk_score_bytes(&self) -> f64 {
        self.unit_bytes() as f64 * self.alpha
    }

    pub fn kv_topk_bytes(&self) -> f64 {
        (2 * self.unit_bytes()) as f64 * self.beta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpotBreakdown {
    pub qk_bytes: f64,
    pub kv_bytes: f64,
    pub hbm_s: f64,
    pub pcie_s: f64,
    pub mlp_s: f64,
    pub total_s: f64,
}

/// `(QK + KV)/B_HBM + ρ·KV/B_PCIe + T_MLP`, with each addend reported.
pub fn tpot(p: &EnvelopeParams) -> TpotBreakdown {
    tpot_from_bytes(
        p.qk_score_bytes(),
        p.kv_topk_bytes(),
        p.rho,
        p.bw_hbm,
        p.bw_pcie,
        p.t_mlp,
    )
}

/// The same decomposition from byte volumes already summed over the batch.
pub fn tpot_from_bytes(
    qk_bytes: f64,
    kv_bytes: f64,
    rho: f64,
    bw_hbm: f64,
    bw_pcie: f64,
    t_mlp: f64,
) -> TpotBreakdown {
    let hbm_s = (qk_bytes + kv_bytes) / bw_hbm;
    let pcie_s = rho * kv_bytes / bw_pcie;
    TpotBreakdown {
        qk_bytes,
        kv_bytes,
        hbm_s,
        pcie_s,
        mlp_s: t_mlp,
        total_s: hbm_s + pcie_s + t_mlp,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopePoint {
    pub batch: u64,
    /// Device pages each head could hold at this batch size.
    pub capacity_pages: u64,
    pub rho: f64,
    pub tpot: TpotBreakdown,
}

impl EnvelopePoint {
    pub const CSV_HEADER: &'static str = "B,qk_bytes,kv_bytes,hbm_s,pcie_s,mlp_s,tpot_s";

    pub fn csv_row(&self) -> String {
        let t = &self.tpot;
        format!(
            "{},{},{},{},{},{},{}",
            self.batch, t.qk_bytes, t.kv_bytes, t.hbm_s, t.pcie_s, t.mlp_s, t.total_s
        )
    }
}

/// Ideal TPOT per batch size with ρ taken from Belady on each batch's trace.
///
/// `capacity` device bytes are split evenly over `B` requests and their
/// heads. A head always keeps at least one step's worth of pages, so the
/// smallest capacities degrade to mandatory-only caching. When a head's
/// whole cache fits, nothing is offloaded and ρ is 0.
pub fn envelope_curve<F>(
    base: &EnvelopeParams,
    shape: &ModelShape,
    sparse: &SparseConfig,
    batches: &[u64],
    capacity: u64,
    mut trace_for: F,
) -> Result<Vec<EnvelopePoint>>
where
    F: FnMut(u64) -> Result<AccessTrace>,
{
    let per_page = page_bytes(shape, sparse);
    let mut out = Vec::with_capacity(batches.len());
    for &b in batches {
        let trace = trace_for(b)?;
        let heads = b.max(1) * shape.heads_per_request();
        let fit = capacity / (heads * per_page);
        let pages = fit.max(trace.max_step_demand());
        let rho = if fit >= trace.page_counts.iter().sum::<u64>() {
            0.0
        } else {
            belady(&trace, pages)?.miss_ratio(&trace)
        };
        let params = EnvelopeParams {
            batch: b,
            rho,
            ..*base
        };
        params.validate()?;
        out.push(EnvelopePoint {
            batch: b,
            capacity_pages: pages,
            rho: params.rho,
            tpot: tpot(&params),
        });
    }
    Ok(out)
}
