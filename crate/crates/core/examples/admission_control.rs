//! Buffer grants under a shared device budget: admission, reclaim and
//! head-of-line queueing.

use kvtier::scheduler::{Admission, GrantMode, Scheduler, SchedulerConfig};
use kvtier::RequestId;

fn admit(s: &mut Scheduler, id: u64, mandatory: u64, length: u64) {
    match s.try_admit(RequestId(id), mandatory, length) {
        Admission::Admitted { grant, reclaimed } => println!(
            "admit r{id}: {} pages (ratio {:.2}), reclaimed {reclaimed:?}",
            grant.total(),
            grant.buffer_ratio()
        ),
        Admission::Queued { required, available } => {
            println!("queue r{id}: needs {required}, only {available} obtainable")
        }
    }
    println!("  granted {} / free {} / reclaimable {}", s.granted(), s.free(), s.reclaimable(None));
}

fn main() -> kvtier::Result<()> {
    let config = SchedulerConfig { min_buffer_ratio: 2.0, ..SchedulerConfig::new(1000) };
    let mut s = Scheduler::new(config, GrantMode::Elastic)?;

    admit(&mut s, 0, 100, 4000);
    admit(&mut s, 1, 80, 2000);
    admit(&mut s, 2, 120, 6000);
    admit(&mut s, 3, 200, 9000);

    // Mandatory demand drops; the grants keep their pages, which become surplus.
    for (id, mandatory) in [(0, 40), (2, 50)] {
        let up = s.buffer_target(RequestId(id), mandatory, 6000)?;
        println!("r{id} mandatory -> {mandatory}: grant stays {}", up.grant.total());
    }
    admit(&mut s, 3, 120, 9000);

    s.release(RequestId(1));
    println!("released r1, free {}", s.free());
    for g in s.grants() {
        println!("  {:?}: mandatory {} + buffer {}", g.request, g.mandatory_pages, g.buffering_pages);
    }
    Ok(())
}
