//! Buffer-pool memory of the node.
//!
//! Virtual memory is handed out in naturally aligned 2 MiB pages. Each page is
//! striped across all channels: stripe `i` of a page lives on channel
//! `i mod C`, and each channel stores its stripes of the page densely in one
//! frame. The page table holds every mapping, so translation never misses.

mod arbiter;

pub use arbiter::{ActiveGuard, FairShareGate, GateGuard, Grant, RegionQueues, RoundRobinArbiter};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use crate::schema::Schema;
use crate::wire::QueuePairId;

pub const PAGE_SIZE: u64 = 1 << 21;
pub const CHANNEL_WORD: u64 = 64;
pub const DEFAULT_STRIPE: u64 = 64;
pub const DEFAULT_CHANNEL_CAPACITY: u64 = 256 << 20;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MemoryError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("out of memory: need {needed} frames per channel, {available} free")]
    OutOfMemory { needed: u64, available: u64 },
    #[error("translation fault at {0:#x}")]
    TranslationFault(u64),
    #[error("{qpair} may not access table at {base:#x}")]
    Permission { qpair: QueuePairId, base: u64 },
    #[error("range [{vaddr:#x}, +{len}) escapes table [{base:#x}, +{size})")]
    Bounds { vaddr: u64, len: u64, base: u64, size: u64 },
    #[error("no live table at {0:#x}")]
    NotAllocated(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryConfig {
    pub channels: usize,
    pub channel_capacity: u64,
    pub stripe: u64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            channels: 2,
            channel_capacity: DEFAULT_CHANNEL_CAPACITY,
            stripe: DEFAULT_STRIPE,
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<(), MemoryError> {
        if self.channels == 0 {
            return Err(MemoryError::Argument("at least one channel required".into()));
        }
        if !self.stripe.is_power_of_two() || self.stripe < CHANNEL_WORD || self.stripe > PAGE_SIZE {
            return Err(MemoryError::Argument(format!(
                "stripe {} must be a power of two in [{CHANNEL_WORD}, {PAGE_SIZE}]",
                self.stripe
            )));
        }
        // Every page must touch every channel.
        if self.stripes_per_page() < self.channels as u64 {
            return Err(MemoryError::Argument(format!(
                "stripe {} leaves fewer stripes per page than {} channels",
                self.stripe, self.channels
            )));
        }
        if self.frames_per_channel() == 0 {
            return Err(MemoryError::Argument(format!(
                "channel capacity {} holds no frame of {} bytes",
                self.channel_capacity,
                self.frame_bytes()
            )));
        }
        Ok(())
    }

    pub fn stripes_per_page(&self) -> u64 {
        PAGE_SIZE / self.stripe
    }

    /// Bytes one channel contributes to a page.
    pub fn frame_bytes(&self) -> u64 {
        self.stripes_per_page().div_ceil(self.channels as u64) * self.stripe
    }

    pub fn frames_per_channel(&self) -> u64 {
        self.channel_capacity / self.frame_bytes()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Read,
    Write,
}

/// One contiguous access to a single channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelRequest {
    pub channel: usize,
    pub offset: u64,
    pub length: u64,
    pub direction: Direction,
}

/// A virtually addressed allocation holding one base table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableHandle {
    pub qpair: QueuePairId,
    pub base_vaddr: u64,
    pub size: u64,
    pub schema: Schema,
}

impl TableHandle {
    pub fn pages(&self) -> u64 {
        self.size.div_ceil(PAGE_SIZE)
    }

    pub fn contains(&self, vaddr: u64, len: u64) -> bool {
        vaddr >= self.base_vaddr
            && vaddr
                .checked_add(len)
                .is_some_and(|end| end <= self.base_vaddr + self.size)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageTableEntry {
    pub vpage: u64,
    /// Frame index on each channel, indexed by channel.
    pub frames: Vec<u32>,
    pub owner_qpairs: BTreeSet<QueuePairId>,
}

#[derive(Debug)]
struct TableRecord {
    handle: TableHandle,
    owners: BTreeSet<QueuePairId>,
}

#[derive(Debug)]
struct MemState {
    page_table: HashMap<u64, Vec<u32>>,
    tables: BTreeMap<u64, TableRecord>,
    free_frames: Vec<BTreeSet<u32>>,
    next_vpage: u64,
}

/// Per-channel access counters.
#[derive(Debug, Default)]
pub struct ChannelCounters {
    pub read_requests: AtomicU64,
    pub read_bytes: AtomicU64,
    pub write_requests: AtomicU64,
    pub write_bytes: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChannelStats {
    pub read_requests: u64,
    pub read_bytes: u64,
    pub write_requests: u64,
    pub write_bytes: u64,
}

pub struct MemoryStack {
    cfg: MemoryConfig,
    frame_bytes: u64,
    state: RwLock<MemState>,
    channels: Vec<RwLock<Vec<u8>>>,
    counters: Vec<ChannelCounters>,
}

/// A piece of a virtual range served by one channel request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlannedRequest {
    pub request: ChannelRequest,
    /// Offset of the first byte within the virtual range.
    pub range_offset: u64,
}

impl MemoryStack {
    pub fn new(cfg: MemoryConfig) -> Result<MemoryStack, MemoryError> {
        cfg.validate()?;
        let frames = cfg.frames_per_channel().min(u32::MAX as u64);
        let frame_bytes = cfg.frame_bytes();
        let channels = (0..cfg.channels)
            .map(|_| RwLock::new(vec![0u8; (frames * frame_bytes) as usize]))
            .collect();
        Ok(MemoryStack {
            frame_bytes,
            state: RwLock::new(MemState {
                page_table: HashMap::new(),
                tables: BTreeMap::new(),
                free_frames: (0..cfg.channels).map(|_| (0..frames as u32).collect()).collect(),
                // Virtual page 0 stays unmapped so a zero address always faults.
                next_vpage: 1,
            }),
            channels,
            counters: (0..cfg.channels).map(|_| ChannelCounters::default()).collect(),
            cfg,
        })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.cfg
    }

    pub fn alloc_table(&self, qpair: QueuePairId, size: u64, schema: Schema) -> Result<TableHandle, MemoryError> {
        if size == 0 {
            return Err(MemoryError::Argument("table size must be positive".into()));
        }
        let pages = size.div_ceil(PAGE_SIZE);
        let mut st = self.state.write().unwrap();
        let available = st.free_frames.iter().map(|f| f.len() as u64).min().unwrap_or(0);
        if available < pages {
            return Err(MemoryError::OutOfMemory { needed: pages, available });
        }
        let base_vpage = st.next_vpage;
        st.next_vpage += pages;
        let mut taken = Vec::with_capacity(pages as usize);
        for p in 0..pages {
            let frames: Vec<u32> = st
                .free_frames
                .iter_mut()
                .map(|free| free.pop_first().expect("checked free frame count"))
                .collect();
            taken.push(frames.clone());
            st.page_table.insert(base_vpage + p, frames);
        }
        let handle = TableHandle {
            qpair,
            base_vaddr: base_vpage * PAGE_SIZE,
            size,
            schema,
        };
        st.tables.insert(
            handle.base_vaddr,
            TableRecord {
                handle: handle.clone(),
                owners: BTreeSet::from([qpair]),
            },
        );
        drop(st);
        for frames in taken {
            for (ch, f) in frames.iter().enumerate() {
                let start = (*f as u64 * self.frame_bytes) as usize;
                self.channels[ch].write().unwrap()[start..start + self.frame_bytes as usize].fill(0);
            }
        }
        Ok(handle)
    }

    pub fn free_table(&self, qpair: QueuePairId, base_vaddr: u64) -> Result<(), MemoryError> {
        let mut st = self.state.write().unwrap();
        let rec = st
            .tables
            .get(&base_vaddr)
            .ok_or(MemoryError::NotAllocated(base_vaddr))?;
        if !rec.owners.contains(&qpair) {
            return Err(MemoryError::Permission { qpair, base: base_vaddr });
        }
        let rec = st.tables.remove(&base_vaddr).unwrap();
        let first = base_vaddr / PAGE_SIZE;
        for vpage in first..first + rec.handle.pages() {
            let frames = st.page_table.remove(&vpage).expect("mapped page of live table");
            for (ch, f) in frames.into_iter().enumerate() {
                st.free_frames[ch].insert(f);
            }
        }
        Ok(())
    }

    /// Grants `other` access to a table owned by `owner`.
    pub fn share_table(&self, owner: QueuePairId, base_vaddr: u64, other: QueuePairId) -> Result<(), MemoryError> {
        let mut st = self.state.write().unwrap();
        let rec = st
            .tables
            .get_mut(&base_vaddr)
            .ok_or(MemoryError::NotAllocated(base_vaddr))?;
        if !rec.owners.contains(&owner) {
            return Err(MemoryError::Permission { qpair: owner, base: base_vaddr });
        }
        rec.owners.insert(other);
        Ok(())
    }

    /// The live table containing `vaddr`, if `qpair` may access it.
    pub fn table_for(&self, qpair: QueuePairId, vaddr: u64) -> Result<TableHandle, MemoryError> {
        let st = self.state.read().unwrap();
        let (_, rec) = st
            .tables
            .range(..=vaddr)
            .next_back()
            .filter(|(_, r)| vaddr < r.handle.base_vaddr + r.handle.pages() * PAGE_SIZE)
            .ok_or(MemoryError::TranslationFault(vaddr))?;
        if !rec.owners.contains(&qpair) {
            return Err(MemoryError::Permission {
                qpair,
                base: rec.handle.base_vaddr,
            });
        }
        Ok(rec.handle.clone())
    }

    pub fn page_entry(&self, vaddr: u64) -> Option<PageTableEntry> {
        let st = self.state.read().unwrap();
        let vpage = vaddr / PAGE_SIZE;
        let frames = st.page_table.get(&vpage)?.clone();
        let base = st.tables.range(..=vaddr).next_back().map(|(b, _)| *b)?;
        Some(PageTableEntry {
            vpage,
            frames,
            owner_qpairs: st.tables[&base].owners.clone(),
        })
    }

    pub fn mapped_pages(&self) -> usize {
        self.state.read().unwrap().page_table.len()
    }

    pub fn live_tables(&self) -> Vec<TableHandle> {
        self.state.read().unwrap().tables.values().map(|r| r.handle.clone()).collect()
    }

    /// Free frames per channel.
    pub fn free_frames(&self) -> Vec<BTreeSet<u32>> {
        self.state.read().unwrap().free_frames.clone()
    }

    /// Every `(channel, frame)` currently mapped.
    pub fn mapped_frames(&self) -> Vec<(usize, u32)> {
        let st = self.state.read().unwrap();
        st.page_table
            .values()
            .flat_map(|fs| fs.iter().copied().enumerate())
            .collect()
    }

    /// Channel and physical byte offset backing `vaddr`.
    pub fn translate(&self, vaddr: u64) -> Result<(usize, u64), MemoryError> {
        let st = self.state.read().unwrap();
        let frames = st
            .page_table
            .get(&(vaddr / PAGE_SIZE))
            .ok_or(MemoryError::TranslationFault(vaddr))?;
        Ok(self.place(frames, vaddr % PAGE_SIZE))
    }

    fn place(&self, frames: &[u32], page_offset: u64) -> (usize, u64) {
        let stripe = page_offset / self.cfg.stripe;
        let c = self.cfg.channels as u64;
        let channel = (stripe % c) as usize;
        let phys = frames[channel] as u64 * self.frame_bytes + (stripe / c) * self.cfg.stripe + page_offset % self.cfg.stripe;
        (channel, phys)
    }

    /// Splits `[vaddr, vaddr+len)` into per-channel requests, merging runs that
    /// are physically contiguous on one channel within a page.
    pub fn plan_requests(&self, vaddr: u64, len: u64, direction: Direction) -> Result<Vec<PlannedRequest>, MemoryError> {
        let st = self.state.read().unwrap();
        self.plan_locked(&st, vaddr, len, direction)
    }

    fn plan_locked(&self, st: &MemState, vaddr: u64, len: u64, direction: Direction) -> Result<Vec<PlannedRequest>, MemoryError> {
        let mut out: Vec<PlannedRequest> = Vec::new();
        let mut pos = vaddr;
        let end = vaddr + len;
        while pos < end {
            // Last request per channel on this page, for merging.
            let mut open: Vec<Option<usize>> = vec![None; self.cfg.channels];
            let frames = st
                .page_table
                .get(&(pos / PAGE_SIZE))
                .ok_or(MemoryError::TranslationFault(pos))?;
            let page_end = (pos / PAGE_SIZE + 1) * PAGE_SIZE;
            while pos < end.min(page_end) {
                let po = pos % PAGE_SIZE;
                let piece = (self.cfg.stripe - po % self.cfg.stripe).min(end - pos);
                let (ch, phys) = self.place(frames, po);
                let merged = open[ch].is_some_and(|i| {
                    let r = &mut out[i].request;
                    if r.offset + r.length == phys {
                        r.length += piece;
                        true
                    } else {
                        false
                    }
                });
                if !merged {
                    open[ch] = Some(out.len());
                    out.push(PlannedRequest {
                        request: ChannelRequest {
                            channel: ch,
                            offset: phys,
                            length: piece,
                            direction,
                        },
                        range_offset: pos - vaddr,
                    });
                }
                pos += piece;
            }
        }
        Ok(out)
    }

    fn check_access(&self, st: &MemState, qpair: QueuePairId, vaddr: u64, len: u64) -> Result<(), MemoryError> {
        let (_, rec) = st
            .tables
            .range(..=vaddr)
            .next_back()
            .filter(|(_, r)| vaddr < r.handle.base_vaddr + r.handle.pages() * PAGE_SIZE)
            .ok_or(MemoryError::TranslationFault(vaddr))?;
        if !rec.owners.contains(&qpair) {
            return Err(MemoryError::Permission {
                qpair,
                base: rec.handle.base_vaddr,
            });
        }
        if !rec.handle.contains(vaddr, len) {
            return Err(MemoryError::Bounds {
                vaddr,
                len,
                base: rec.handle.base_vaddr,
                size: rec.handle.size,
            });
        }
        Ok(())
    }

    /// Reads `out.len()` bytes at `vaddr` on behalf of `qpair`.
    ///
    /// The range is fanned out into per-channel requests which are served
    /// channel by channel, highest channel first, and scattered back into
    /// virtual-address order.
    pub fn read_into(&self, qpair: QueuePairId, vaddr: u64, out: &mut [u8]) -> Result<(), MemoryError> {
        let len = out.len() as u64;
        if len == 0 {
            return Ok(());
        }
        let st = self.state.read().unwrap();
        self.check_access(&st, qpair, vaddr, len)?;
        let plan = self.plan_locked(&st, vaddr, len, Direction::Read)?;
        drop(st);
        for ch in (0..self.cfg.channels).rev() {
            let mem = self.channels[ch].read().unwrap();
            for p in plan.iter().filter(|p| p.request.channel == ch) {
                self.counters[ch].read_requests.fetch_add(1, Ordering::Relaxed);
                self.counters[ch].read_bytes.fetch_add(p.request.length, Ordering::Relaxed);
                self.scatter(&mem, p, vaddr, out);
            }
        }
        Ok(())
    }

    /// Copies one channel request's bytes into their virtual positions.
    fn scatter(&self, mem: &[u8], p: &PlannedRequest, vaddr: u64, out: &mut [u8]) {
        let c = self.cfg.channels as u64;
        let stride = self.cfg.stripe * c;
        let mut phys = p.request.offset;
        let mut virt = p.range_offset;
        let mut remaining = p.request.length;
        while remaining > 0 {
            let in_stripe = (vaddr + virt) % self.cfg.stripe;
            let piece = (self.cfg.stripe - in_stripe).min(remaining);
            out[virt as usize..(virt + piece) as usize].copy_from_slice(&mem[phys as usize..(phys + piece) as usize]);
            phys += piece;
            remaining -= piece;
            virt += piece;
            // The channel's next stripe is C stripes further on in the same page.
            virt += stride - self.cfg.stripe;
        }
    }

    pub fn read(&self, qpair: QueuePairId, vaddr: u64, len: u64) -> Result<Vec<u8>, MemoryError> {
        let mut out = vec![0u8; len as usize];
        self.read_into(qpair, vaddr, &mut out)?;
        Ok(out)
    }

    pub fn write(&self, qpair: QueuePairId, vaddr: u64, data: &[u8]) -> Result<(), MemoryError> {
        let len = data.len() as u64;
        if len == 0 {
            return Ok(());
        }
        let st = self.state.read().unwrap();
        self.check_access(&st, qpair, vaddr, len)?;
        let plan = self.plan_locked(&st, vaddr, len, Direction::Write)?;
        drop(st);
        let c = self.cfg.channels as u64;
        let stride = self.cfg.stripe * c;
        for ch in 0..self.cfg.channels {
            let mut mem = self.channels[ch].write().unwrap();
            for p in plan.iter().filter(|p| p.request.channel == ch) {
                self.counters[ch].write_requests.fetch_add(1, Ordering::Relaxed);
                self.counters[ch].write_bytes.fetch_add(p.request.length, Ordering::Relaxed);
                let mut phys = p.request.offset;
                let mut virt = p.range_offset;
                let mut remaining = p.request.length;
                while remaining > 0 {
                    let piece = (self.cfg.stripe - (vaddr + virt) % self.cfg.stripe).min(remaining);
                    mem[phys as usize..(phys + piece) as usize]
                        .copy_from_slice(&data[virt as usize..(virt + piece) as usize]);
                    phys += piece;
                    remaining -= piece;
                    virt += piece + stride - self.cfg.stripe;
                }
            }
        }
        Ok(())
    }

    pub fn channel_stats(&self) -> Vec<ChannelStats> {
        self.counters
            .iter()
            .map(|c| ChannelStats {
                read_requests: c.read_requests.load(Ordering::Relaxed),
                read_bytes: c.read_bytes.load(Ordering::Relaxed),
                write_requests: c.write_requests.load(Ordering::Relaxed),
                write_bytes: c.write_bytes.load(Ordering::Relaxed),
            })
            .collect()
    }

    pub fn reset_stats(&self) {
        for c in &self.counters {
            c.read_requests.store(0, Ordering::Relaxed);
            c.read_bytes.store(0, Ordering::Relaxed);
            c.write_requests.store(0, Ordering::Relaxed);
            c.write_bytes.store(0, Ordering::Relaxed);
        }
    }
}

#[cfg(test)]
mod tests;
