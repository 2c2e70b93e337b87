use std::collections::VecDeque;

/// Fixed-depth cache of recently seen keys with true LRU replacement.
/// Position 0 holds the most recent key.
#[derive(Debug, Clone)]
pub struct LruShiftRegister<K> {
    depth: usize,
    cells: VecDeque<K>,
}

impl<K: PartialEq> LruShiftRegister<K> {
    pub fn new(depth: usize) -> Self {
        LruShiftRegister {
            depth,
            cells: VecDeque::with_capacity(depth + 1),
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> impl Iterator<Item = &K> {
        self.cells.iter()
    }

    pub fn position(&self, pred: impl Fn(&K) -> bool) -> Option<usize> {
        self.cells.iter().position(pred)
    }

    /// Moves the cell at `pos` to the front and returns it.
    pub fn promote(&mut self, pos: usize) -> &mut K {
        let k = self.cells.remove(pos).expect("cell in range");
        self.cells.push_front(k);
        &mut self.cells[0]
    }

    /// Inserts a key not currently cached, shifting out the oldest one.
    pub fn push(&mut self, key: K) -> Option<K> {
        if self.depth == 0 {
            return Some(key);
        }
        self.cells.push_front(key);
        if self.cells.len() > self.depth {
            self.cells.pop_back()
        } else {
            None
        }
    }

    /// Records an access. Returns whether the key was cached.
    pub fn access(&mut self, key: K) -> bool {
        match self.position(|k| *k == key) {
            Some(pos) => {
                self.promote(pos);
                true
            }
            None => {
                self.push(key);
                false
            }
        }
    }

    pub fn contains(&self, key: &K) -> bool {
        self.cells.contains(key)
    }
}
