//! Buffer-elastic admission and proportional page reclamation.
//!
//! Grants are counted in device pages per head lane: a grant of `g` pages
//! gives each of the request's heads `g` pages.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::RequestId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    #[serde(default = "default_ratio")]
    pub min_buffer_ratio: f64,
    /// Pages per head lane shared by all requests.
    pub device_page_budget: u64,
    #[serde(default = "default_max_batch")]
    pub max_batch: usize,
}

fn default_ratio() -> f64 {
    5.0
}

fn default_max_batch() -> usize {
    32
}

impl SchedulerConfig {
    pub fn new(device_page_budget: u64) -> Self {
        Self {
            min_buffer_ratio: default_ratio(),
            device_page_budget,
            max_batch: default_max_batch(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_buffer_ratio >= 1.0 && self.min_buffer_ratio.is_finite()) {
            return Err(Error::InvalidSpecParams(format!(
                "min_buffer_ratio {} must be >= 1",
                self.min_buffer_ratio
            )));
        }
        if self.max_batch == 0 {
            return Err(Error::InvalidSpecParams("max_batch must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BufferGrant {
    pub request: RequestId,
    pub mandatory_pages: u64,
    pub buffering_pages: u64,
    /// Sequence length used to weight reclamation.
    pub length: u64,
}

impl BufferGrant {
    pub fn total(&self) -> u64 {
        self.mandatory_pages + self.buffering_pages
    }

    pub fn buffer_ratio(&self) -> f64 {
        if self.mandatory_pages == 0 {
            0.0
        } else {
            self.buffering_pages as f64 / self.mandatory_pages as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Admission {
    Admitted {
        grant: BufferGrant,
        /// Pages taken from other requests to make room.
        reclaimed: Vec<(RequestId, u64)>,
    },
    Queued {
        required: u64,
        available: u64,
    },
}

/// Result of re-targeting a grant for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetUpdate {
    pub grant: BufferGrant,
    pub reclaimed: Vec<(RequestId, u64)>,
}

/// How a grant follows mandatory demand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrantMode {
    /// Mandatory plus at least `min_buffer_ratio` times as many buffer pages.
    Elastic,
    /// Exactly the mandatory pages.
    MandatoryOnly,
}

#[derive(Debug, Clone)]
pub struct Scheduler {
    config: SchedulerConfig,
    mode: GrantMode,
    grants: BTreeMap<RequestId, BufferGrant>,
    /// Admission order, oldest first.
    order: Vec<RequestId>,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig, mode: GrantMode) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            mode,
            grants: BTreeMap::new(),
            order: Vec::new(),
        })
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn grant(&self, id: RequestId) -> Option<&BufferGrant> {
        self.grants.get(&id)
    }

    pub fn grants(&self) -> impl Iterator<Item = &BufferGrant> {
        self.order.iter().map(|id| &self.grants[id])
    }

    /// Active requests, oldest admission first.
    pub fn active(&self) -> &[RequestId] {
        &self.order
    }

    pub fn granted(&self) -> u64 {
        self.grants.values().map(BufferGrant::total).sum()
    }

    pub fn free(&self) -> u64 {
        self.config.device_page_budget.saturating_sub(self.granted())
    }

    /// Pages needed to admit a request with `mandatory` pages.
    pub fn requirement(&self, mandatory: u64) -> u64 {
        match self.mode {
            GrantMode::Elastic => {
                (mandatory as f64 * (1.0 + self.config.min_buffer_ratio)).ceil() as u64
            }
            GrantMode::MandatoryOnly => mandatory,
        }
    }

    fn surplus(&self, g: &BufferGrant) -> u64 {
        g.total().saturating_sub(self.requirement(g.mandatory_pages))
    }

    /// Pages that could be taken from active grants without breaking any floor.
    pub fn reclaimable(&self, except: Option<RequestId>) -> u64 {
        self.grants
            .values()
            .filter(|g| Some(g.request) != except)
            .map(|g| self.surplus(g))
            .sum()
    }

    /// Admits when free pages, plus any reclaimable surplus, cover
    /// `mandatory·(1 + min_buffer_ratio)`.
    pub fn try_admit(&mut self, id: RequestId, mandatory: u64, length: u64) -> Admission {
        let required = self.requirement(mandatory);
        let free = self.free();
        let available = free + self.reclaimable(None);
        if self.order.len() >= self.config.max_batch
            || self.grants.contains_key(&id)
            || available < required
        {
            return Admission::Queued {
                required,
                available: if self.order.len() >= self.config.max_batch {
                    0
                } else {
                    available
                },
            };
        }
        let reclaimed = if required > free {
            self.reclaim(required - free, None)
                .expect("availability checked above")
        } else {
            Vec::new()
        };
        let grant = BufferGrant {
            request: id,
            mandatory_pages: mandatory,
            buffering_pages: required - mandatory,
            length,
        };
        self.grants.insert(id, grant);
        self.order.push(id);
        Admission::Admitted { grant, reclaimed }
    }

    /// Takes up to `pages` surplus pages from active grants in proportion
    /// to sequence length. Returns the per-request contributions, which may
    /// sum to less than `pages` when surplus runs out.
    pub fn reclaim(
        &mut self,
        pages: u64,
        except: Option<RequestId>,
    ) -> Result<Vec<(RequestId, u64)>> {
        let caps: Vec<(RequestId, u64, u64)> = self
            .grants
            .values()
            .filter(|g| Some(g.request) != except)
            .map(|g| (g.request, g.length, self.surplus(g)))
            .filter(|&(_, _, s)| s > 0)
            .collect();
        if caps.is_empty() {
            return Err(Error::NothingReclaimable);
        }
        let taken = proportional_split(pages, &caps);
        let mut out = Vec::new();
        for (id, n) in taken {
            if n > 0 {
                let g = self.grants.get_mut(&id).expect("listed above");
                g.buffering_pages -= n;
                out.push((id, n));
            }
        }
        Ok(out)
    }

    /// Re-targets a grant to this step's mandatory demand. Grants grow
    /// toward the buffer floor from free pages; a mandatory increase that
    /// free pages cannot cover reclaims from other requests. Fails with
    /// `InsufficientBuffer` when even that falls short, leaving every grant
    /// untouched.
    pub fn buffer_target(&mut self, id: RequestId, mandatory: u64, length: u64) -> Result<TargetUpdate> {
        let g = *self.grants.get(&id).ok_or(Error::Invariant(format!(
            "no grant for {id}"
        )))?;
        let free = self.free();
        let mut reclaimed = Vec::new();
        let mut total = g.total();
        if self.mode == GrantMode::MandatoryOnly {
            total = total.min(mandatory);
        }
        if mandatory > total {
            let short = mandatory - total;
            if short > free {
                let available = free + self.reclaimable(Some(id));
                if available < short {
                    return Err(Error::InsufficientBuffer {
                        demand: mandatory,
                        available: total + available,
                    });
                }
                reclaimed = self.reclaim(short - free, Some(id))?;
            }
            total = mandatory;
        }
        let floor = self.requirement(mandatory);
        let room = self
            .config
            .device_page_budget
            .saturating_sub(self.granted() - g.total());
        if total < floor {
            total = floor.min(room).max(total);
        }
        let grant = BufferGrant {
            request: id,
            mandatory_pages: mandatory,
            buffering_pages: total - mandatory,
            length,
        };
        self.grants.insert(id, grant);
        Ok(TargetUpdate { grant, reclaimed })
    }

    /// Youngest active request, the preemption victim.
    pub fn youngest(&self) -> Option<RequestId> {
        self.order.last().copied()
    }

    /// Drops a grant, returning its pages to the free pool.
    pub fn release(&mut self, id: RequestId) -> Option<BufferGrant> {
        self.order.retain(|&r| r != id);
        self.grants.remove(&id)
    }
}

/// Splits `pages` across `(id, weight, cap)` in proportion to weight.
///
/// Each round hands out floor shares and then single pages by largest
/// remainder, ties by lowest id. Requests that hit their cap drop out and the
/// rest is split again among the others.
pub fn proportional_split(pages: u64, caps: &[(RequestId, u64, u64)]) -> Vec<(RequestId, u64)> {
    let mut taken: BTreeMap<RequestId, u64> = caps.iter().map(|c| (c.0, 0)).collect();
    let mut left = pages;
    loop {
        let open: Vec<(RequestId, u64, u64)> = caps
            .iter()
            .map(|&(id, w, cap)| (id, w, cap - taken[&id]))
            .filter(|&(_, _, room)| room > 0)
            .collect();
        if left == 0 || open.is_empty() {
            break;
        }
        let weight: u128 = open.iter().map(|o| o.1.max(1) as u128).sum();
        let mut shares: Vec<(RequestId, u64, u128, u64)> = open
            .iter()
            .map(|&(id, w, room)| {
                let num = left as u128 * w.max(1) as u128;
                ((id), (num / weight) as u64, num % weight, room)
            })
            .collect();
        let given: u64 = shares.iter().map(|s| s.1).sum();
        let mut order: Vec<usize> = (0..shares.len()).collect();
        order.sort_by(|&a, &b| shares[b].2.cmp(&shares[a].2).then(shares[a].0.cmp(&shares[b].0)));
        for &i in order.iter().take(left.saturating_sub(given) as usize) {
            shares[i].1 += 1;
        }
        let mut round = 0;
        for (id, share, _, room) in shares {
            let n = share.min(room);
            *taken.get_mut(&id).expect("present") += n;
            round += n;
        }
        left -= round;
        if round == 0 {
            break;
        }
    }
    caps.iter().map(|c| (c.0, taken[&c.0])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sched(budget: u64) -> Scheduler {
        Scheduler::new(SchedulerConfig::new(budget), GrantMode::Elastic).unwrap()
    }

    fn admitted(a: &Admission) -> bool {
        matches!(a, Admission::Admitted { .. })
    }

    #[test]
    fn admission_threshold_is_six_times_mandatory() {
        let mut s = sched(384);
        assert_eq!(s.requirement(64), 384);
        assert!(admitted(&s.try_admit(RequestId(0), 64, 32_768)));
        assert_eq!(s.free(), 0);
        let mut tight = sched(383);
        assert_eq!(
            tight.try_admit(RequestId(0), 64, 32_768),
            Admission::Queued {
                required: 384,
                available: 383
            }
        );
    }

    #[test]
    fn proportional_reclaim_by_length() {
        let caps = [(RequestId(0), 32_768, 100), (RequestId(1), 98_304, 100)];
        assert_eq!(
            proportional_split(40, &caps),
            vec![(RequestId(0), 10), (RequestId(1), 30)]
        );
        let caps = [
            (RequestId(0), 1, 10),
            (RequestId(1), 1, 10),
            (RequestId(2), 2, 10),
        ];
        assert_eq!(
            proportional_split(7, &caps),
            vec![(RequestId(0), 2), (RequestId(1), 2), (RequestId(2), 3)]
        );
    }

    #[test]
    fn capped_shares_spill_to_others() {
        let caps = [(RequestId(0), 1, 2), (RequestId(1), 1, 100)];
        assert_eq!(
            proportional_split(10, &caps),
            vec![(RequestId(0), 2), (RequestId(1), 8)]
        );
    }

    #[test]
    fn request_at_floor_has_nothing_to_give() {
        let mut s = sched(1000);
        s.try_admit(RequestId(0), 10, 100);
        assert_eq!(s.reclaim(5, None), Err(Error::NothingReclaimable));
    }

    #[test]
    fn shrinking_selection_creates_surplus() {
        let mut s = sched(600);
        s.try_admit(RequestId(0), 64, 100);
        let u = s.buffer_target(RequestId(0), 32, 100).unwrap();
        assert_eq!(u.grant.total(), 384);
        assert_eq!(s.reclaimable(None), 384 - 192);
    }

    #[test]
    fn admission_reclaims_surplus() {
        let mut s = sched(120);
        s.try_admit(RequestId(0), 20, 100);
        s.buffer_target(RequestId(0), 10, 100).unwrap();
        assert_eq!(s.free(), 0);
        match s.try_admit(RequestId(1), 10, 100) {
            Admission::Admitted { grant, reclaimed } => {
                assert_eq!(grant.total(), 60);
                assert_eq!(reclaimed, vec![(RequestId(0), 60)]);
            }
            q => panic!("{q:?}"),
        }
        assert_eq!(s.granted(), 120);
    }

    #[test]
    fn growing_mandatory_reclaims_then_fails() {
        let mut s = sched(130);
        s.try_admit(RequestId(0), 10, 100);
        s.try_admit(RequestId(1), 10, 100);
        s.buffer_target(RequestId(1), 5, 100).unwrap();
        // r1 now holds 60 against a floor of 30.
        let u = s.buffer_target(RequestId(0), 100, 100).unwrap();
        assert_eq!(u.reclaimed, vec![(RequestId(1), 30)]);
        assert_eq!(u.grant.total(), 100);
        assert!(s.granted() <= 130);
        let before: Vec<BufferGrant> = s.grants().copied().collect();
        assert!(matches!(
            s.buffer_target(RequestId(0), 200, 100),
            Err(Error::InsufficientBuffer { .. })
        ));
        let after: Vec<BufferGrant> = s.grants().copied().collect();
        assert_eq!(before, after);
    }

    #[test]
    fn idle_request_keeps_grant() {
        let mut s = sched(1000);
        s.try_admit(RequestId(0), 10, 100);
        s.try_admit(RequestId(1), 10, 100);
        let g = *s.grant(RequestId(0)).unwrap();
        s.buffer_target(RequestId(1), 12, 100).unwrap();
        assert_eq!(*s.grant(RequestId(0)).unwrap(), g);
    }

    #[test]
    fn mandatory_only_tracks_demand() {
        let mut s = Scheduler::new(SchedulerConfig::new(100), GrantMode::MandatoryOnly).unwrap();
        assert!(admitted(&s.try_admit(RequestId(0), 10, 1)));
        assert_eq!(s.grant(RequestId(0)).unwrap().total(), 10);
        assert_eq!(s.buffer_target(RequestId(0), 4, 1).unwrap().grant.total(), 4);
        assert_eq!(s.buffer_target(RequestId(0), 12, 1).unwrap().grant.total(), 12);
    }

    #[test]
    fn max_batch_queues() {
        let mut s = Scheduler::new(
            SchedulerConfig {
                max_batch: 1,
                ..SchedulerConfig::new(1000)
            },
            GrantMode::Elastic,
        )
        .unwrap();
        assert!(admitted(&s.try_admit(RequestId(0), 1, 1)));
        assert!(!admitted(&s.try_admit(RequestId(1), 1, 1)));
        s.release(RequestId(0));
        assert!(admitted(&s.try_admit(RequestId(1), 1, 1)));
        assert_eq!(s.youngest(), Some(RequestId(1)));
    }

    #[test]
    fn rejects_ratio_below_one() {
        let c = SchedulerConfig {
            min_buffer_ratio: 0.5,
            ..SchedulerConfig::new(10)
        };
        assert!(Scheduler::new(c, GrantMode::Elastic).is_err());
    }

    fn admit_all(budget: u64, queue: &[u64]) -> Vec<RequestId> {
        let mut s = sched(budget);
        let mut out = Vec::new();
        for (i, &m) in queue.iter().enumerate() {
            if admitted(&s.try_admit(RequestId(i as u64), m, 100)) {
                out.push(RequestId(i as u64));
            } else {
                break;
            }
        }
        out
    }

    proptest! {
        #[test]
        fn split_is_exact_and_capped(
            pages in 0u64..500,
            caps in prop::collection::vec((1u64..1000, 0u64..200), 1..8),
        ) {
            let caps: Vec<(RequestId, u64, u64)> = caps
                .iter()
                .enumerate()
                .map(|(i, &(w, c))| (RequestId(i as u64), w, c))
                .collect();
            let out = proportional_split(pages, &caps);
            let total: u64 = out.iter().map(|o| o.1).sum();
            let room: u64 = caps.iter().map(|c| c.2).sum();
            prop_assert_eq!(total, pages.min(room));
            for (o, c) in out.iter().zip(&caps) {
                prop_assert!(o.1 <= c.2);
            }
        }

        #[test]
        fn grants_never_exceed_budget(
            budget in 0u64..2000,
            ops in prop::collection::vec((0u64..6, 1u64..80, any::<bool>()), 1..40),
        ) {
            let mut s = sched(budget);
            for (id, m, admit) in ops {
                let id = RequestId(id);
                if admit || s.grant(id).is_none() {
                    s.try_admit(id, m, 100 + id.0);
                } else {
                    let _ = s.buffer_target(id, m, 100 + id.0);
                }
                prop_assert!(s.granted() <= budget);
                for g in s.grants() {
                    prop_assert!(g.total() >= g.mandatory_pages);
                }
            }
        }

        #[test]
        fn admission_is_monotone_in_budget(
            budget in 0u64..2000, extra in 0u64..500,
            queue in prop::collection::vec(1u64..80, 1..10),
        ) {
            let small = admit_all(budget, &queue);
            let large = admit_all(budget + extra, &queue);
            prop_assert!(large.len() >= small.len());
            prop_assert_eq!(&large[..small.len()], &small[..]);
        }
    }
}
