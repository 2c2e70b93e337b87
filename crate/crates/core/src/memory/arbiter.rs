//! Round-robin arbitration of memory access between dynamic regions.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use super::ChannelRequest;

/// Pending requests of one region, one queue per channel.
#[derive(Debug, Clone, Default)]
pub struct RegionQueues {
    pub per_channel: Vec<VecDeque<ChannelRequest>>,
}

impl RegionQueues {
    pub fn new(channels: usize) -> Self {
        RegionQueues {
            per_channel: vec![VecDeque::new(); channels],
        }
    }

    pub fn push(&mut self, r: ChannelRequest) {
        self.per_channel[r.channel].push_back(r);
    }

    pub fn is_empty(&self) -> bool {
        self.per_channel.iter().all(|q| q.is_empty())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grant {
    pub region: usize,
    pub request: ChannelRequest,
}

/// First index after `last` (cyclically) satisfying `ready`.
fn next_round_robin(last: usize, n: usize, ready: impl Fn(usize) -> bool) -> Option<usize> {
    (1..=n).map(|k| (last + k) % n).find(|&i| ready(i))
}

/// Per-channel round-robin arbiter over region queues.
#[derive(Debug, Clone)]
pub struct RoundRobinArbiter {
    last: Vec<usize>,
}

impl RoundRobinArbiter {
    pub fn new(channels: usize, regions: usize) -> Self {
        // Start so that region 0 is served first.
        RoundRobinArbiter {
            last: vec![regions.saturating_sub(1); channels],
        }
    }

    /// Picks the next request for every channel, rotating priority across regions.
    pub fn arbitrate(&mut self, pending: &mut [RegionQueues]) -> Vec<Option<Grant>> {
        let regions = pending.len();
        (0..self.last.len())
            .map(|ch| {
                let pick = next_round_robin(self.last[ch], regions, |r| {
                    pending[r].per_channel.get(ch).is_some_and(|q| !q.is_empty())
                })?;
                self.last[ch] = pick;
                let request = pending[pick].per_channel[ch].pop_front().unwrap();
                Some(Grant { region: pick, request })
            })
            .collect()
    }
}

#[derive(Debug)]
struct GateState {
    active: Vec<bool>,
    waiting: Vec<bool>,
    holder: Option<usize>,
    last: usize,
    /// Active region whose turn it is but which has not asked yet, and since when.
    absent: Option<(usize, Instant)>,
    grants: Vec<u64>,
    skips: u64,
    log: Vec<u16>,
}

impl GateState {
    /// The region whose turn it is, if any region wants one. An active
    /// region that stays away longer than `patience` loses its turn.
    fn turn(&mut self, patience: Duration) -> Option<usize> {
        let n = self.waiting.len();
        let next = next_round_robin(self.last, n, |r| self.waiting[r] || self.active[r])?;
        if self.waiting[next] {
            self.absent = None;
            return Some(next);
        }
        match self.absent {
            Some((r, since)) if r == next => {
                if since.elapsed() < patience {
                    return Some(next);
                }
                self.skips += 1;
                self.absent = None;
                next_round_robin(self.last, n, |r| self.waiting[r])
            }
            _ => {
                self.absent = Some((next, Instant::now()));
                Some(next)
            }
        }
    }
}

/// Serializes memory bursts of concurrently running regions in round-robin
/// order.
///
/// A region inside [`FairShareGate::enter`] keeps its turn between bursts,
/// so regions with continuous demand alternate strictly even if one of them
/// is briefly off the CPU. Regions that only call
/// [`FairShareGate::acquire`] take part while they wait.
#[derive(Debug)]
pub struct FairShareGate {
    state: Mutex<GateState>,
    cv: Condvar,
    patience: Duration,
    log_limit: usize,
}

/// Held while a region's burst is being served; releases the gate on drop.
pub struct GateGuard<'a> {
    gate: &'a FairShareGate,
}

/// Marks a region as having a request stream in progress.
pub struct ActiveGuard<'a> {
    gate: &'a FairShareGate,
    region: usize,
}

impl FairShareGate {
    pub fn new(regions: usize) -> Self {
        Self::with_patience(regions, Duration::from_millis(2))
    }

    /// `patience` bounds how long the others wait for an active region that
    /// is not asking for its turn.
    pub fn with_patience(regions: usize, patience: Duration) -> Self {
        FairShareGate {
            state: Mutex::new(GateState {
                active: vec![false; regions],
                waiting: vec![false; regions],
                holder: None,
                last: regions.saturating_sub(1),
                absent: None,
                grants: vec![0; regions],
                skips: 0,
                log: Vec::new(),
            }),
            cv: Condvar::new(),
            patience,
            log_limit: 1 << 20,
        }
    }

    pub fn enter(&self, region: usize) -> ActiveGuard<'_> {
        self.state.lock().unwrap().active[region] = true;
        ActiveGuard { gate: self, region }
    }

    pub fn acquire(&self, region: usize) -> GateGuard<'_> {
        let mut st = self.state.lock().unwrap();
        st.waiting[region] = true;
        loop {
            if st.holder.is_none() {
                let pick = st.turn(self.patience).expect("caller is waiting");
                if pick == region {
                    st.waiting[region] = false;
                    st.holder = Some(region);
                    st.last = region;
                    st.grants[region] += 1;
                    if st.log.len() < self.log_limit {
                        st.log.push(region as u16);
                    }
                    return GateGuard { gate: self };
                }
                self.cv.notify_all();
                if !st.waiting[pick] {
                    // Waiting for an absent region; recheck once its patience runs out.
                    st = self.cv.wait_timeout(st, self.patience).unwrap().0;
                    continue;
                }
            }
            st = self.cv.wait(st).unwrap();
        }
    }

    pub fn grants(&self) -> Vec<u64> {
        self.state.lock().unwrap().grants.clone()
    }

    /// Turns given up by active regions that did not ask in time.
    pub fn skips(&self) -> u64 {
        self.state.lock().unwrap().skips
    }

    /// Regions in the order they were granted.
    pub fn grant_log(&self) -> Vec<u16> {
        self.state.lock().unwrap().log.clone()
    }

    pub fn reset(&self) {
        let mut st = self.state.lock().unwrap();
        st.grants.iter_mut().for_each(|g| *g = 0);
        st.skips = 0;
        st.log.clear();
    }
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut st = self.gate.state.lock().unwrap();
        st.holder = None;
        drop(st);
        self.gate.cv.notify_all();
    }
}

impl Drop for ActiveGuard<'_> {
    fn drop(&mut self) {
        let mut st = self.gate.state.lock().unwrap();
        st.active[self.region] = false;
        if st.absent.is_some_and(|(r, _)| r == self.region) {
            st.absent = None;
        }
        drop(st);
        self.gate.cv.notify_all();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::Direction;
    use std::sync::Arc;

    fn req(channel: usize) -> ChannelRequest {
        ChannelRequest {
            channel,
            offset: 0,
            length: 64,
            direction: Direction::Read,
        }
    }

    fn saturated(regions: usize, channels: usize, depth: usize) -> Vec<RegionQueues> {
        (0..regions)
            .map(|_| {
                let mut q = RegionQueues::new(channels);
                for _ in 0..depth {
                    for ch in 0..channels {
                        q.push(req(ch));
                    }
                }
                q
            })
            .collect()
    }

    #[test]
    fn single_region_gets_everything() {
        let mut pending = saturated(1, 2, 50);
        let mut arb = RoundRobinArbiter::new(2, 1);
        for _ in 0..50 {
            let g = arb.arbitrate(&mut pending);
            assert!(g.iter().all(|g| g.unwrap().region == 0));
        }
        assert!(arb.arbitrate(&mut pending).iter().all(Option::is_none));
    }

    #[test]
    fn two_regions_split_evenly() {
        let mut pending = saturated(2, 1, 1000);
        let mut arb = RoundRobinArbiter::new(1, 2);
        let mut count = [0u32; 2];
        for _ in 0..1000 {
            count[arb.arbitrate(&mut pending)[0].unwrap().region] += 1;
        }
        assert!(count.iter().all(|c| c.abs_diff(500) <= 1), "{count:?}");
    }

    #[test]
    fn skips_idle_regions() {
        let mut pending = vec![RegionQueues::new(1), RegionQueues::new(1), RegionQueues::new(1)];
        pending[0].push(req(0));
        pending[2].push(req(0));
        pending[2].push(req(0));
        let mut arb = RoundRobinArbiter::new(1, 3);
        let order: Vec<usize> = (0..3).map(|_| arb.arbitrate(&mut pending)[0].unwrap().region).collect();
        assert_eq!(order, vec![0, 2, 2]);
    }

    #[test]
    fn gate_serves_concurrent_regions() {
        let gate = Arc::new(FairShareGate::new(4));
        let handles: Vec<_> = (0..4)
            .map(|r| {
                let gate = gate.clone();
                std::thread::spawn(move || {
                    for _ in 0..200 {
                        let _g = gate.acquire(r);
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(gate.grants(), vec![200; 4]);
        assert_eq!(gate.grant_log().len(), 800);
    }

    #[test]
    fn active_regions_alternate_strictly() {
        let gate = Arc::new(FairShareGate::with_patience(3, std::time::Duration::from_secs(5)));
        let start = Arc::new(std::sync::Barrier::new(3));
        let handles: Vec<_> = (0..3)
            .map(|r| {
                let (gate, start) = (gate.clone(), start.clone());
                std::thread::spawn(move || {
                    let _a = gate.enter(r);
                    start.wait();
                    for i in 0..300 {
                        let _g = gate.acquire(r);
                        if i % 50 == 0 {
                            std::thread::yield_now();
                        }
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        let log = gate.grant_log();
        // Once all three are in, grants rotate until the first one leaves.
        let body = &log[3..log.len() - 3];
        let first = body[0];
        for (i, g) in body.iter().enumerate() {
            assert_eq!(*g as usize, (first as usize + i) % 3, "{log:?}");
        }
        assert_eq!(gate.skips(), 0);
    }

    #[test]
    fn absent_region_loses_its_turn() {
        let gate = FairShareGate::with_patience(2, std::time::Duration::from_millis(5));
        let _a = gate.enter(0);
        // Region 0 is active but never asks; region 1 still gets through.
        for _ in 0..3 {
            drop(gate.acquire(1));
        }
        assert_eq!(gate.grants(), vec![0, 3]);
        assert!(gate.skips() >= 1);
    }
}
