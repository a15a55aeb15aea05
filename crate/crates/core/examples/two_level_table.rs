//! A sparse logical array backed by a shared segment pool.

use kvtier::metadata::two_level::TwoLevelTable;

fn main() -> kvtier::Result<()> {
    // One million logical entries, 256 per segment, room for 64 segments.
    let mut table: TwoLevelTable<u32> = TwoLevelTable::new(1 << 20, 256, 64);

    for idx in [0, 1, 255, 256, 70_000, 1_000_000] {
        table.set(idx, idx as u32 * 3)?;
    }
    println!("mapped segments: {}", table.mapped_segments());
    println!("entry 70000 = {:?}, entry 70001 = {:?}", table.get(70_000), table.get(70_001));
    println!(
        "logical {} B, physical {} B",
        table.logical_bytes(4),
        table.physical_bytes(4)
    );

    table.truncate(300);
    println!("after truncate(300): {} segments mapped", table.mapped_segments());
    Ok(())
}
