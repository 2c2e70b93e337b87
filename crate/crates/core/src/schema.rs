//! Row layouts of base tables.

use std::fmt;

/// Fixed-width row layout: the widths of each column, in order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Schema {
    column_bytes: Vec<u32>,
    offsets: Vec<u32>,
    tuple_bytes: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid schema: {0}")]
pub struct SchemaError(pub String);

/// Columns are addressed by 64-bit flag masks.
pub const MAX_COLUMNS: usize = 64;

impl Schema {
    pub fn new(column_bytes: Vec<u32>) -> Result<Schema, SchemaError> {
        if column_bytes.is_empty() {
            return Err(SchemaError("no columns".into()));
        }
        if column_bytes.len() > MAX_COLUMNS {
            return Err(SchemaError(format!("{} columns, at most {MAX_COLUMNS}", column_bytes.len())));
        }
        if column_bytes.contains(&0) {
            return Err(SchemaError("zero-width column".into()));
        }
        let mut offsets = Vec::with_capacity(column_bytes.len());
        let mut acc: u64 = 0;
        for w in &column_bytes {
            offsets.push(acc as u32);
            acc += *w as u64;
        }
        if acc > u32::MAX as u64 / 2 {
            return Err(SchemaError("tuple too wide".into()));
        }
        Ok(Schema {
            column_bytes,
            offsets,
            tuple_bytes: acc as u32,
        })
    }

    /// `n` columns of `width` bytes each.
    pub fn uniform(n: usize, width: u32) -> Schema {
        Schema::new(vec![width; n]).expect("valid uniform schema")
    }

    pub fn tuple_bytes(&self) -> usize {
        self.tuple_bytes as usize
    }

    pub fn columns(&self) -> usize {
        self.column_bytes.len()
    }

    pub fn column_bytes(&self) -> &[u32] {
        &self.column_bytes
    }

    pub fn width(&self, col: usize) -> usize {
        self.column_bytes[col] as usize
    }

    pub fn offset(&self, col: usize) -> usize {
        self.offsets[col] as usize
    }

    pub fn column<'a>(&self, row: &'a [u8], col: usize) -> &'a [u8] {
        let off = self.offset(col);
        &row[off..off + self.width(col)]
    }

    /// Mask with one bit per column.
    pub fn all_columns(&self) -> u64 {
        if self.columns() == 64 {
            u64::MAX
        } else {
            (1u64 << self.columns()) - 1
        }
    }

    pub fn check_mask(&self, mask: u64) -> Result<(), SchemaError> {
        if mask & !self.all_columns() != 0 {
            return Err(SchemaError(format!(
                "flags {mask:#x} reference columns beyond {}",
                self.columns()
            )));
        }
        Ok(())
    }

    /// Bytes a row contributes when projected with `mask`.
    pub fn projected_bytes(&self, mask: u64) -> usize {
        mask_columns(mask).map(|c| self.width(c)).sum()
    }

    /// Appends the masked columns of `row` to `out`.
    pub fn project_into(&self, row: &[u8], mask: u64, out: &mut Vec<u8>) {
        if mask == self.all_columns() {
            out.extend_from_slice(row);
            return;
        }
        for c in mask_columns(mask) {
            out.extend_from_slice(self.column(row, c));
        }
    }

    /// Schema of rows after projecting with `mask`.
    pub fn project(&self, mask: u64) -> Result<Schema, SchemaError> {
        Schema::new(mask_columns(mask).map(|c| self.column_bytes[c]).collect())
    }

    /// Column widths as little-endian `u32`s, the `ALLOC_TABLE` payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.column_bytes.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Schema, SchemaError> {
        if b.len() % 4 != 0 {
            return Err(SchemaError("column list not a multiple of 4 bytes".into()));
        }
        Schema::new(b.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} ({} B/tuple)", self.column_bytes, self.tuple_bytes)
    }
}

/// Column indices set in `mask`, ascending.
pub fn mask_columns(mask: u64) -> impl Iterator<Item = usize> + Clone {
    let mut m = mask;
    std::iter::from_fn(move || {
        if m == 0 {
            return None;
        }
        let c = m.trailing_zeros() as usize;
        m &= m - 1;
        Some(c)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_and_projection() {
        let s = Schema::new(vec![8, 4, 8, 2]).unwrap();
        assert_eq!(s.tuple_bytes(), 22);
        assert_eq!(s.offset(2), 12);
        assert_eq!(s.projected_bytes(0b0101), 16);
        let row: Vec<u8> = (0..22).collect();
        let mut out = Vec::new();
        s.project_into(&row, 0b1010, &mut out);
        assert_eq!(out, vec![8, 9, 10, 11, 20, 21]);
        assert!(s.check_mask(0b10000).is_err());
        assert_eq!(Schema::from_bytes(&s.to_bytes()).unwrap(), s);
    }

    #[test]
    fn mask_iteration() {
        assert_eq!(mask_columns(0b1001_0010).collect::<Vec<_>>(), vec![1, 4, 7]);
        assert_eq!(mask_columns(1 << 63).collect::<Vec<_>>(), vec![63]);
        assert_eq!(Schema::uniform(64, 1).all_columns(), u64::MAX);
    }

    #[test]
    fn rejects_degenerate() {
        assert!(Schema::new(vec![]).is_err());
        assert!(Schema::new(vec![8, 0]).is_err());
        assert!(Schema::new(vec![1; 65]).is_err());
    }
}
