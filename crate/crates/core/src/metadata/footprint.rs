use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::store::{
    MetadataStore, DIRECTORY_SLOT_BYTES, HOST_PAGE_ID_BYTES, META_ENTRY_BYTES, OFFSET_ENTRY_BYTES,
};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Table {
    MetaPartition,
    DevicePageTable,
    PartitionOffset,
    HostPageArray,
}

impl Table {
    pub const ALL: [Table; 4] = [
        Table::MetaPartition,
        Table::DevicePageTable,
        Table::PartitionOffset,
        Table::HostPageArray,
    ];

    /// Tier the table lives on under tier-split placement.
    pub fn tier(self) -> Tier {
        match self {
            Table::MetaPartition | Table::DevicePageTable => Tier::Device,
            Table::PartitionOffset | Table::HostPageArray => Tier::Host,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Table::MetaPartition => "meta_partition",
            Table::DevicePageTable => "device_page_table",
            Table::PartitionOffset => "partition_offset",
            Table::HostPageArray => "host_page_array",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Device,
    Host,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Device => "device",
            Tier::Host => "host",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableFootprint {
    pub table: Table,
    pub tier: Tier,
    pub entry_bytes: u64,
    /// Flat array sized for max_batch heads at max_context.
    pub logical_bytes: u64,
    /// Bytes in mapped segments.
    pub physical_bytes: u64,
    /// Statically allocated top-level directory for the same worst case.
    pub directory_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootprintReport {
    pub tables: Vec<TableFootprint>,
}

impl FootprintReport {
    pub fn table(&self, table: Table) -> &TableFootprint {
        self.tables
            .iter()
            .find(|t| t.table == table)
            .expect("report covers every table")
    }

    /// Flat layout with every table on the device.
    pub fn flat_logical_bytes(&self) -> u64 {
        self.tables.iter().map(|t| t.logical_bytes).sum()
    }

    pub fn logical_bytes(&self, tier: Tier) -> u64 {
        self.tables
            .iter()
            .filter(|t| t.tier == tier)
            .map(|t| t.logical_bytes)
            .sum()
    }

    /// Two-level layout, segments plus directories, every table on the device.
    pub fn two_level_bytes(&self) -> u64 {
        self.tables
            .iter()
            .map(|t| t.physical_bytes + t.directory_bytes)
            .sum()
    }

    /// Two-level layout restricted to one tier of the split placement.
    pub fn two_level_tier_bytes(&self, tier: Tier) -> u64 {
        self.tables
            .iter()
            .filter(|t| t.tier == tier)
            .map(|t| t.physical_bytes + t.directory_bytes)
            .sum()
    }

    /// `table,tier,logical_bytes,physical_bytes` with directory rows and a
    /// totals row. Directory rows have no flat counterpart, so their logical
    /// bytes are 0.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| crate::error::Error::Io(e.to_string());
        w.write_record(["table", "tier", "logical_bytes", "physical_bytes"])
            .map_err(io)?;
        for t in &self.tables {
            w.write_record([
                t.table.name().to_string(),
                t.tier.to_string(),
                t.logical_bytes.to_string(),
                t.physical_bytes.to_string(),
            ])
            .map_err(io)?;
        }
        for t in &self.tables {
            w.write_record([
                format!("{}_directory", t.table.name()),
                t.tier.to_string(),
                "0".to_string(),
                t.directory_bytes.to_string(),
            ])
            .map_err(io)?;
        }
        w.write_record([
            "total".to_string(),
            "all".to_string(),
            self.flat_logical_bytes().to_string(),
            self.two_level_bytes().to_string(),
        ])
        .map_err(io)?;
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

impl MetadataStore {
    pub fn footprint(&self) -> FootprintReport {
        let l = &self.layout;
        let heads = l.max_heads();
        let eps = l.entries_per_segment as u64;
        let row = |table: Table, width: u64, per_head: u64, mapped: usize| TableFootprint {
            table,
            tier: table.tier(),
            entry_bytes: width,
            logical_bytes: heads * per_head * width,
            physical_bytes: mapped as u64 * eps * width,
            directory_bytes: heads * per_head.div_ceil(eps) * DIRECTORY_SLOT_BYTES,
        };
        FootprintReport {
            tables: vec![
                row(
                    Table::MetaPartition,
                    META_ENTRY_BYTES,
                    l.max_partitions_per_head,
                    self.meta_pool.mapped_segments(),
                ),
                row(
                    Table::DevicePageTable,
                    l.device_entry_bytes,
                    l.max_device_pages_per_head,
                    self.dpt_pool.mapped_segments(),
                ),
                row(
                    Table::PartitionOffset,
                    OFFSET_ENTRY_BYTES,
                    l.max_partitions_per_head,
                    self.offset_pool.mapped_segments(),
                ),
                row(
                    Table::HostPageArray,
                    HOST_PAGE_ID_BYTES,
                    l.max_host_pages_per_head,
                    self.host_pool.mapped_segments(),
                ),
            ],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Granularity, ModelShape, RetrievalBudget, SparseConfig, TierParams};
    use crate::metadata::store::MetadataConfig;

    fn llama70b_store() -> MetadataStore {
        let model = ModelShape {
            num_layers: 80,
            num_kv_heads: 8,
            head_dim: 128,
            bytes_per_element: 2,
            max_context: 131_072,
        };
        let sparse = SparseConfig {
            retrieval_budget: RetrievalBudget::Fraction(0.0156),
            partition_granularity: Granularity::Fixed(8),
            page_size: 8,
            summary_ratio: 0.125,
            update_interval: 256,
        };
        let tiers = TierParams {
            device_capacity: 80 << 30,
            host_capacity: 1 << 40,
            bw_hbm: 2e12,
            bw_pcie: 32e9,
            t_mlp: 0.0,
            per_transfer_latency: 0.0,
        };
        let meta = MetadataConfig {
            entries_per_segment: 256,
            max_batch: 32,
            pool_segments: None,
        };
        MetadataStore::new(&model, &sparse, &tiers, &meta, 64)
    }

    #[test]
    fn empty_store_has_no_physical_bytes() {
        let report = llama70b_store().footprint();
        assert!(report.tables.iter().all(|t| t.physical_bytes == 0));
    }

    #[test]
    fn flat_device_page_table_product() {
        let report = llama70b_store().footprint();
        let dpt = report.table(Table::DevicePageTable);
        assert_eq!(dpt.logical_bytes, 32 * 16_384 * 80 * 8 * 8);
        assert_eq!(dpt.logical_bytes, 2_684_354_560);
    }

    #[test]
    fn csv_has_header_and_totals() {
        let csv = llama70b_store().footprint().to_csv_string();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "table,tier,logical_bytes,physical_bytes");
        assert!(lines.last().unwrap().starts_with("total,all,"));
        assert_eq!(lines.len(), 1 + 4 + 4 + 1);
    }
}
