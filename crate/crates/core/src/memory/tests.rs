use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const QP: QueuePairId = QueuePairId(1);
const OTHER: QueuePairId = QueuePairId(2);

fn stack(channels: usize, pages: u64) -> MemoryStack {
    let cfg = MemoryConfig {
        channels,
        channel_capacity: pages * PAGE_SIZE.div_ceil(channels as u64),
        stripe: DEFAULT_STRIPE,
    };
    MemoryStack::new(cfg).unwrap()
}

fn schema() -> Schema {
    Schema::uniform(8, 8)
}

/// Scalar restatement of the striping rule, independent of the stack's request planner.
fn reference_place(cfg: &MemoryConfig, frames: &[u32], page_offset: u64) -> (usize, u64) {
    let stripe_index = page_offset / cfg.stripe;
    let channel = (stripe_index % cfg.channels as u64) as usize;
    let frame_bytes = (PAGE_SIZE / cfg.stripe).div_ceil(cfg.channels as u64) * cfg.stripe;
    let within = (stripe_index / cfg.channels as u64) * cfg.stripe + page_offset % cfg.stripe;
    (channel, frames[channel] as u64 * frame_bytes + within)
}

#[test]
fn minimum_allocation_is_one_aligned_page() {
    let m = stack(2, 8);
    let h = m.alloc_table(QP, 1, schema()).unwrap();
    assert_eq!(h.base_vaddr % PAGE_SIZE, 0);
    assert_eq!(m.mapped_pages(), 1);
    let h2 = m.alloc_table(QP, PAGE_SIZE + 1, schema()).unwrap();
    assert_eq!(h2.base_vaddr % PAGE_SIZE, 0);
    assert_eq!(m.mapped_pages(), 3);
    assert!(h2.base_vaddr >= h.base_vaddr + PAGE_SIZE);
}

#[test]
fn zero_size_and_out_of_memory() {
    let m = stack(2, 4);
    assert!(matches!(m.alloc_table(QP, 0, schema()), Err(MemoryError::Argument(_))));
    m.alloc_table(QP, 3 * PAGE_SIZE, schema()).unwrap();
    assert!(matches!(
        m.alloc_table(QP, 2 * PAGE_SIZE, schema()),
        Err(MemoryError::OutOfMemory { needed: 2, available: 1 })
    ));
}

#[test]
fn free_unmaps_and_checks_owner() {
    let m = stack(2, 4);
    let h = m.alloc_table(QP, 4096, schema()).unwrap();
    assert!(matches!(m.free_table(OTHER, h.base_vaddr), Err(MemoryError::Permission { .. })));
    m.free_table(QP, h.base_vaddr).unwrap();
    assert!(matches!(m.translate(h.base_vaddr), Err(MemoryError::TranslationFault(_))));
    assert!(matches!(m.free_table(QP, h.base_vaddr), Err(MemoryError::NotAllocated(_))));
}

#[test]
fn alloc_free_cycle_reuses_frames() {
    let m = stack(2, 8);
    let _keep = m.alloc_table(QP, PAGE_SIZE, schema()).unwrap();
    let before = m.free_frames();
    let h = m.alloc_table(QP, 3 * PAGE_SIZE, schema()).unwrap();
    assert_ne!(m.free_frames(), before);
    m.free_table(QP, h.base_vaddr).unwrap();
    assert_eq!(m.free_frames(), before);
}

#[test]
fn random_alloc_free_bookkeeping() {
    let m = stack(3, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut live: BTreeMap<u64, u64> = BTreeMap::new();
    for _ in 0..100 {
        if live.is_empty() || rng.gen_bool(0.6) {
            let size = rng.gen_range(1..=5 * PAGE_SIZE);
            if let Ok(h) = m.alloc_table(QP, size, schema()) {
                live.insert(h.base_vaddr, size);
            }
        } else {
            let k = *live.keys().nth(rng.gen_range(0..live.len())).unwrap();
            m.free_table(QP, k).unwrap();
            live.remove(&k);
        }
        let frames = m.mapped_frames();
        let distinct: HashSet<_> = frames.iter().collect();
        assert_eq!(distinct.len(), frames.len(), "frames mapped twice");
        let pages: u64 = live.values().map(|s| s.div_ceil(PAGE_SIZE)).sum();
        assert_eq!(m.mapped_pages() as u64, pages);
        assert_eq!(frames.len() as u64, pages * 3);
    }
}

#[test]
fn striping_alternates_channels() {
    let m = stack(2, 4);
    let h = m.alloc_table(QP, PAGE_SIZE, schema()).unwrap();
    let chans: Vec<usize> = [0, 64, 128].iter().map(|o| m.translate(h.base_vaddr + o).unwrap().0).collect();
    assert_eq!(chans, vec![0, 1, 0]);
    let entry = m.page_entry(h.base_vaddr).unwrap();
    for off in (0..PAGE_SIZE).step_by(4099) {
        assert_eq!(m.translate(h.base_vaddr + off).unwrap(), reference_place(m.config(), &entry.frames, off));
    }

    let single = stack(1, 2);
    let h = single.alloc_table(QP, PAGE_SIZE, schema()).unwrap();
    for off in (0..PAGE_SIZE).step_by(64 * 1001) {
        assert_eq!(single.translate(h.base_vaddr + off).unwrap().0, 0);
    }
}

#[test]
fn translation_is_injective_over_a_page() {
    for channels in [2, 3] {
        let m = stack(channels, 4);
        let h = m.alloc_table(QP, PAGE_SIZE, schema()).unwrap();
        let entry = m.page_entry(h.base_vaddr).unwrap();
        let frame_bytes = m.config().frame_bytes();
        let mut seen: Vec<Vec<bool>> = vec![vec![false; frame_bytes as usize]; channels];
        for off in 0..PAGE_SIZE {
            let (ch, phys) = m.translate(h.base_vaddr + off).unwrap();
            let frame_base = entry.frames[ch] as u64 * frame_bytes;
            assert!(phys >= frame_base && phys < frame_base + frame_bytes);
            let slot = &mut seen[ch][(phys - frame_base) as usize];
            assert!(!*slot, "collision at offset {off}");
            *slot = true;
        }
        let used: usize = seen.iter().map(|s| s.iter().filter(|b| **b).count()).sum();
        assert_eq!(used as u64, PAGE_SIZE);
    }
}

#[test]
fn write_read_round_trip_and_page_boundaries() {
    let m = stack(2, 8);
    let size = 3 * PAGE_SIZE;
    let h = m.alloc_table(QP, size, schema()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<u8> = (0..size).map(|_| rng.gen()).collect();
    m.write(QP, h.base_vaddr, &data).unwrap();
    assert_eq!(m.read(QP, h.base_vaddr, size).unwrap(), data);
    let span = m.read(QP, h.base_vaddr + PAGE_SIZE - 1000, 5000).unwrap();
    assert_eq!(span, &data[(PAGE_SIZE - 1000) as usize..(PAGE_SIZE + 4000) as usize]);
    let odd = m.read(QP, h.base_vaddr + 7, 1 << 20).unwrap();
    assert_eq!(odd, &data[7..7 + (1 << 20)]);
}

#[test]
fn reads_fan_out_to_both_channels() {
    let m = stack(2, 4);
    let h = m.alloc_table(QP, PAGE_SIZE, schema()).unwrap();
    m.reset_stats();
    m.read(QP, h.base_vaddr, 128 << 10).unwrap();
    let stats = m.channel_stats();
    for s in &stats {
        assert!(s.read_bytes.abs_diff(64 << 10) <= 64, "{stats:?}");
        assert!(s.read_requests >= 1);
    }
    let plan = m.plan_requests(h.base_vaddr + 32, 128 << 10, Direction::Read).unwrap();
    let per: Vec<u64> = (0..2)
        .map(|c| plan.iter().filter(|p| p.request.channel == c).map(|p| p.request.length).sum())
        .collect();
    assert_eq!(per.iter().sum::<u64>(), 128 << 10);
    assert!(per.iter().all(|b| b.abs_diff(64 << 10) <= 64), "{per:?}");
}

#[test]
fn unwritten_memory_reads_zero_even_after_reuse() {
    let m = stack(2, 2);
    let h = m.alloc_table(QP, PAGE_SIZE, schema()).unwrap();
    m.write(QP, h.base_vaddr, &vec![0xEE; PAGE_SIZE as usize]).unwrap();
    m.free_table(QP, h.base_vaddr).unwrap();
    let h = m.alloc_table(QP, PAGE_SIZE, schema()).unwrap();
    assert!(m.read(QP, h.base_vaddr, PAGE_SIZE).unwrap().iter().all(|b| *b == 0));
}

#[test]
fn write_semantics() {
    let m = stack(2, 2);
    let h = m.alloc_table(QP, 4096, schema()).unwrap();
    m.write(QP, h.base_vaddr, &[]).unwrap();
    m.write(QP, h.base_vaddr, &[1; 100]).unwrap();
    m.write(QP, h.base_vaddr + 50, &[2; 100]).unwrap();
    let got = m.read(QP, h.base_vaddr, 150).unwrap();
    assert!(got[..50].iter().all(|b| *b == 1));
    assert!(got[50..].iter().all(|b| *b == 2));
}

#[test]
fn bounds_and_isolation() {
    let m = stack(2, 4);
    let h = m.alloc_table(QP, 4096, schema()).unwrap();
    assert!(matches!(m.read(QP, h.base_vaddr + 4000, 200), Err(MemoryError::Bounds { .. })));
    assert!(matches!(m.write(QP, h.base_vaddr + 4096, &[1]), Err(MemoryError::Bounds { .. })));
    assert!(matches!(m.read(OTHER, h.base_vaddr, 8), Err(MemoryError::Permission { .. })));
    assert!(matches!(m.read(QP, 0, 8), Err(MemoryError::TranslationFault(0))));
    m.share_table(QP, h.base_vaddr, OTHER).unwrap();
    assert!(m.read(OTHER, h.base_vaddr, 8).is_ok());
    assert!(m.page_entry(h.base_vaddr).unwrap().owner_qpairs.contains(&OTHER));
}

#[test]
fn random_ops_match_flat_reference() {
    let m = stack(3, 16);
    let size = 2 * PAGE_SIZE + 12_345;
    let h = m.alloc_table(QP, size, schema()).unwrap();
    let mut reference = vec![0u8; size as usize];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..10_000 {
        let off = rng.gen_range(0..size);
        let len = rng.gen_range(0..=(size - off).min(9000));
        if rng.gen_bool(0.5) {
            let data: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            m.write(QP, h.base_vaddr + off, &data).unwrap();
            reference[off as usize..(off + len) as usize].copy_from_slice(&data);
        } else {
            let got = m.read(QP, h.base_vaddr + off, len).unwrap();
            assert_eq!(got, &reference[off as usize..(off + len) as usize]);
        }
    }
    assert_eq!(m.read(QP, h.base_vaddr, size).unwrap(), reference);
}
