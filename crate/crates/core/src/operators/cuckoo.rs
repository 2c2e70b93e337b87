//! Cuckoo hashing over several independently hashed tables.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CuckooConfig {
    pub tables: usize,
    pub slots_per_table: usize,
    pub max_evictions: usize,
    /// One odd multiplier per table.
    pub seeds: Vec<u64>,
}

impl CuckooConfig {
    pub fn new(tables: usize, slots_per_table: usize, max_evictions: usize) -> Self {
        let mut s = 0x0123_4567_89ab_cdefu64;
        let seeds = (0..tables).map(|_| splitmix64(&mut s) | 1).collect();
        CuckooConfig {
            tables,
            slots_per_table,
            max_evictions,
            seeds,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.tables == 0 || self.seeds.len() != self.tables {
            return Err(format!("{} tables with {} seeds", self.tables, self.seeds.len()));
        }
        if !self.slots_per_table.is_power_of_two() {
            return Err(format!("{} slots per table is not a power of two", self.slots_per_table));
        }
        if self.seeds.iter().any(|s| s % 2 == 0) {
            return Err("hash seeds must be odd".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.tables {
            return Err("hash seeds must be distinct".into());
        }
        Ok(())
    }
}

impl Default for CuckooConfig {
    fn default() -> Self {
        CuckooConfig::new(4, 1 << 16, 32)
    }
}

fn splitmix64(s: &mut u64) -> u64 {
    *s = s.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *s;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds arbitrary-length key bytes into 64 bits; keys of up to 8 bytes map
/// to their little-endian value.
pub fn fold_key(key: &[u8]) -> u64 {
    let mut x = 0u64;
    for chunk in key.chunks(8) {
        let mut b = [0u8; 8];
        b[..chunk.len()].copy_from_slice(chunk);
        x = x.rotate_left(29) ^ u64::from_le_bytes(b);
    }
    x
}

type Slot<V> = Option<(Box<[u8]>, V)>;

#[derive(Debug, Clone)]
pub struct CuckooTableSet<V> {
    cfg: CuckooConfig,
    bits: u32,
    tables: Vec<Vec<Slot<V>>>,
    len: usize,
}

impl<V> CuckooTableSet<V> {
    pub fn new(cfg: CuckooConfig) -> Self {
        cfg.validate().expect("valid cuckoo configuration");
        let bits = cfg.slots_per_table.trailing_zeros();
        let tables = (0..cfg.tables)
            .map(|_| std::iter::repeat_with(|| None).take(cfg.slots_per_table).collect())
            .collect();
        CuckooTableSet {
            cfg,
            bits,
            tables,
            len: 0,
        }
    }

    pub fn config(&self) -> &CuckooConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Slot of `key` in table `t`.
    pub fn hash(&self, t: usize, key: &[u8]) -> usize {
        if self.bits == 0 {
            return 0;
        }
        (self.cfg.seeds[t].wrapping_mul(fold_key(key)) >> (64 - self.bits)) as usize
    }

    fn find(&self, key: &[u8]) -> Option<(usize, usize)> {
        (0..self.cfg.tables).find_map(|t| {
            let s = self.hash(t, key);
            match &self.tables[t][s] {
                Some((k, _)) if **k == *key => Some((t, s)),
                _ => None,
            }
        })
    }

    pub fn get(&self, key: &[u8]) -> Option<&V> {
        let (t, s) = self.find(key)?;
        self.tables[t][s].as_ref().map(|(_, v)| v)
    }

    pub fn get_mut(&mut self, key: &[u8]) -> Option<&mut V> {
        let (t, s) = self.find(key)?;
        self.tables[t][s].as_mut().map(|(_, v)| v)
    }

    pub fn contains(&self, key: &[u8]) -> bool {
        self.find(key).is_some()
    }

    /// Inserts a key that is not present. Residents are displaced into the
    /// next table for up to `max_evictions` steps; if no free slot turns up
    /// the displacements are undone and the new entry is handed back.
    pub fn insert(&mut self, key: &[u8], value: V) -> Result<(), (Box<[u8]>, V)> {
        debug_assert!(!self.contains(key));
        let k = self.cfg.tables;
        for t in 0..k {
            let s = self.hash(t, key);
            if self.tables[t][s].is_none() {
                self.tables[t][s] = Some((key.into(), value));
                self.len += 1;
                return Ok(());
            }
        }
        let mut cur: Slot<V> = Some((key.into(), value));
        let mut path = Vec::with_capacity(self.cfg.max_evictions);
        let mut t = 0;
        for _ in 0..self.cfg.max_evictions {
            let s = self.hash(t, &cur.as_ref().unwrap().0);
            std::mem::swap(&mut cur, &mut self.tables[t][s]);
            path.push((t, s));
            t = (t + 1) % k;
            let s = self.hash(t, &cur.as_ref().unwrap().0);
            if self.tables[t][s].is_none() {
                self.tables[t][s] = cur;
                self.len += 1;
                return Ok(());
            }
        }
        for (t, s) in path.into_iter().rev() {
            std::mem::swap(&mut cur, &mut self.tables[t][s]);
        }
        Err(cur.unwrap())
    }

    /// Occupied entries, table by table.
    pub fn entries(&self) -> impl Iterator<Item = (&[u8], &V)> {
        self.tables
            .iter()
            .flatten()
            .filter_map(|s| s.as_ref().map(|(k, v)| (&**k, v)))
    }
}
