//! Tier-split mapping tables with two-level indexing.

mod footprint;
mod store;
pub mod two_level;

pub use footprint::{FootprintReport, Table, TableFootprint, Tier};
pub use store::{
    DevicePageEntry, DevicePageId, HeadTables, HostPageId, MetaPartitionEntry, MetadataConfig,
    MetadataStore, PartitionInfo, PartitionOffsetEntry, Residency, TableLayout,
    DEVICE_PAGE_ENTRY_BYTES, DIRECTORY_SLOT_BYTES, HOST_PAGE_ID_BYTES, META_ENTRY_BYTES,
    OFFSET_ENTRY_BYTES, WIDE_DEVICE_PAGE_ENTRY_BYTES,
};

#[cfg(test)]
pub(crate) use store::tests as tests_support;
