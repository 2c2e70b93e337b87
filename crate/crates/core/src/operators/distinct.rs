use std::collections::VecDeque;

use super::{parse_and_project, Annotations, CuckooConfig, CuckooTableSet, LruShiftRegister, OperatorError, OverflowBuffer};
use crate::schema::Schema;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistinctConfig {
    pub cuckoo: CuckooConfig,
    pub cache_depth: usize,
    /// Steps between a key's lookup and its insert becoming visible in the tables.
    pub latency: usize,
    pub max_overflow: usize,
}

impl Default for DistinctConfig {
    fn default() -> Self {
        DistinctConfig {
            cuckoo: CuckooConfig::default(),
            cache_depth: 8,
            latency: 8,
            max_overflow: 1 << 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Emit {
    Main(Vec<u8>),
    Overflow(Vec<u8>),
}

/// Streaming duplicate elimination.
///
/// A key is looked up in the LRU cache, then in the cuckoo tables, and is
/// inserted `latency` steps later. Keys still in flight are caught by the
/// cache as long as its depth covers the latency.
pub struct Distinct {
    table: CuckooTableSet<()>,
    cache: LruShiftRegister<Box<[u8]>>,
    delay: VecDeque<Option<(Box<[u8]>, Vec<u8>)>>,
    latency: usize,
}

impl Distinct {
    pub fn new(cfg: &DistinctConfig) -> Self {
        Distinct {
            table: CuckooTableSet::new(cfg.cuckoo.clone()),
            cache: LruShiftRegister::new(cfg.cache_depth),
            delay: VecDeque::with_capacity(cfg.latency + 1),
            latency: cfg.latency,
        }
    }

    /// Feeds one tuple. Returns the entry leaving the insert stage, if any.
    pub fn push(&mut self, key: &[u8], row: &[u8]) -> Option<Emit> {
        let hit = match self.cache.position(|k| **k == *key) {
            Some(pos) => {
                self.cache.promote(pos);
                true
            }
            None => {
                self.cache.push(key.into());
                self.table.contains(key)
            }
        };
        self.delay.push_back((!hit).then(|| (key.into(), row.to_vec())));
        if self.delay.len() > self.latency {
            self.commit()
        } else {
            None
        }
    }

    fn commit(&mut self) -> Option<Emit> {
        let (key, row) = self.delay.pop_front()??;
        if self.table.contains(&key) {
            // Only reachable when the cache is shallower than the latency.
            return Some(Emit::Main(row));
        }
        match self.table.insert(&key, ()) {
            Ok(()) => Some(Emit::Main(row)),
            Err(_) => Some(Emit::Overflow(row)),
        }
    }

    /// Drains the insert pipeline.
    pub fn finish(&mut self) -> Vec<Emit> {
        let mut out = Vec::new();
        while !self.delay.is_empty() {
            out.extend(self.commit());
        }
        out
    }
}

/// Checks that the key columns are non-empty and part of the projection.
pub fn check_distinct_keys(proj_flags: u64, key_flags: u64) -> Result<(), OperatorError> {
    if key_flags == 0 || key_flags & !proj_flags != 0 {
        return Err(OperatorError::Argument(format!(
            "key flags {key_flags:#x} must be non-empty and within projection {proj_flags:#x}"
        )));
    }
    Ok(())
}

/// Distinct over a whole table. Rows are projected with `proj_flags`; keys
/// are the `key_flags` columns, which must be a subset of the projection.
pub fn distinct_stream(
    raw: &[u8],
    schema: &Schema,
    proj_flags: u64,
    key_flags: u64,
    cfg: &DistinctConfig,
) -> Result<(Vec<Vec<u8>>, OverflowBuffer), OperatorError> {
    check_distinct_keys(proj_flags, key_flags)?;
    let ann = Annotations {
        proj_flags,
        group_flags: key_flags,
        ..Default::default()
    };
    let mut d = Distinct::new(cfg);
    let mut main = Vec::new();
    let mut overflow = OverflowBuffer::new(schema.projected_bytes(proj_flags), cfg.max_overflow);
    let (mut key, mut row) = (Vec::new(), Vec::new());
    let mut take = |e: Emit| -> Result<(), OperatorError> {
        match e {
            Emit::Main(r) => main.push(r),
            Emit::Overflow(r) => overflow.push(&r)?,
        }
        Ok(())
    };
    for t in parse_and_project(raw, schema, ann)? {
        key.clear();
        row.clear();
        schema.project_into(t.bytes, key_flags, &mut key);
        schema.project_into(t.bytes, proj_flags, &mut row);
        if let Some(e) = d.push(&key, &row) {
            take(e)?;
        }
    }
    for e in d.finish() {
        take(e)?;
    }
    Ok((main, overflow))
}
