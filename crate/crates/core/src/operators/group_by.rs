use super::{parse_and_project, read_int, Annotations, CuckooConfig, CuckooTableSet, LruShiftRegister, OperatorError, OverflowBuffer};
use crate::schema::Schema;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum AggFn {
    Count = 0,
    Min = 1,
    Max = 2,
    Sum = 3,
    Avg = 4,
}

impl AggFn {
    pub const ALL: [AggFn; 5] = [AggFn::Count, AggFn::Min, AggFn::Max, AggFn::Sum, AggFn::Avg];

    pub fn from_code(c: u8) -> Option<AggFn> {
        Self::ALL.get(c as usize).copied()
    }

    /// Bytes of the partial aggregate on the wire. AVG travels as SUM and COUNT.
    pub fn partial_bytes(self) -> usize {
        if self == AggFn::Avg {
            16
        } else {
            8
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Measure {
    pub column: usize,
    pub func: AggFn,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregateSpec {
    pub key_columns: u64,
    pub measures: Vec<Measure>,
}

impl AggregateSpec {
    pub fn validate(&self, schema: &Schema) -> Result<(), OperatorError> {
        if self.key_columns == 0 {
            return Err(OperatorError::Argument("no group-by key columns".into()));
        }
        schema
            .check_mask(self.key_columns)
            .map_err(|e| OperatorError::Argument(e.to_string()))?;
        if self.measures.len() > 64 {
            return Err(OperatorError::Argument("more than 64 measures".into()));
        }
        for m in &self.measures {
            if m.column >= schema.columns() || !matches!(schema.width(m.column), 1 | 2 | 4 | 8) {
                return Err(OperatorError::Argument(format!(
                    "measure column {} is not an integer column",
                    m.column
                )));
            }
        }
        Ok(())
    }

    pub fn key_bytes(&self, schema: &Schema) -> usize {
        schema.projected_bytes(self.key_columns)
    }

    /// Bytes of one result row: key, partial aggregates and the saturation mask.
    pub fn row_bytes(&self, key_bytes: usize) -> usize {
        key_bytes + self.measures.iter().map(|m| m.func.partial_bytes()).sum::<usize>() + 8
    }
}

/// Partial aggregate of one measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Acc {
    pub count: u64,
    pub sum: i64,
    pub min: i64,
    pub max: i64,
    pub saturated: bool,
}

impl Acc {
    fn of(v: i64) -> Acc {
        Acc {
            count: 1,
            sum: v,
            min: v,
            max: v,
            saturated: false,
        }
    }

    fn merge(&mut self, o: &Acc) {
        self.count += o.count;
        let (s, over) = self.sum.overflowing_add(o.sum);
        self.sum = if over {
            if o.sum > 0 {
                i64::MAX
            } else {
                i64::MIN
            }
        } else {
            s
        };
        self.saturated |= over || o.saturated;
        self.min = self.min.min(o.min);
        self.max = self.max.max(o.max);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AggValue {
    Int(i64),
    Float(f64),
}

/// One group: key bytes and one partial aggregate per measure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupRow {
    pub key: Vec<u8>,
    pub accs: Vec<Acc>,
}

impl GroupRow {
    pub fn from_row(spec: &AggregateSpec, schema: &Schema, row: &[u8]) -> GroupRow {
        let mut key = Vec::with_capacity(spec.key_bytes(schema));
        schema.project_into(row, spec.key_columns, &mut key);
        GroupRow {
            key,
            accs: Self::row_accs(spec, schema, row),
        }
    }

    fn row_accs(spec: &AggregateSpec, schema: &Schema, row: &[u8]) -> Vec<Acc> {
        spec.measures
            .iter()
            .map(|m| Acc::of(read_int(schema.column(row, m.column))))
            .collect()
    }

    pub fn merge(&mut self, o: &GroupRow) {
        for (a, b) in self.accs.iter_mut().zip(&o.accs) {
            a.merge(b);
        }
    }

    /// Bit `i` is set when measure `i` reports a sum that saturated.
    pub fn saturated_mask(&self, spec: &AggregateSpec) -> u64 {
        spec.measures
            .iter()
            .zip(&self.accs)
            .enumerate()
            .filter(|(_, (m, a))| a.saturated && matches!(m.func, AggFn::Sum | AggFn::Avg))
            .fold(0, |mask, (i, _)| mask | 1 << i)
    }

    pub fn encode(&self, spec: &AggregateSpec, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.key);
        for (m, a) in spec.measures.iter().zip(&self.accs) {
            match m.func {
                AggFn::Count => out.extend_from_slice(&a.count.to_le_bytes()),
                AggFn::Min => out.extend_from_slice(&a.min.to_le_bytes()),
                AggFn::Max => out.extend_from_slice(&a.max.to_le_bytes()),
                AggFn::Sum => out.extend_from_slice(&a.sum.to_le_bytes()),
                AggFn::Avg => {
                    out.extend_from_slice(&a.sum.to_le_bytes());
                    out.extend_from_slice(&a.count.to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&self.saturated_mask(spec).to_le_bytes());
    }

    /// Inverse of [`GroupRow::encode`]. Fields a function does not carry are
    /// filled neutrally so that merging stays correct.
    pub fn decode(spec: &AggregateSpec, key_bytes: usize, b: &[u8]) -> Result<GroupRow, OperatorError> {
        if b.len() != spec.row_bytes(key_bytes) {
            return Err(OperatorError::Parse(format!(
                "group row of {} bytes, expected {}",
                b.len(),
                spec.row_bytes(key_bytes)
            )));
        }
        let word = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        let sat = word(b.len() - 8);
        let mut off = key_bytes;
        let mut accs = Vec::with_capacity(spec.measures.len());
        for (i, m) in spec.measures.iter().enumerate() {
            let mut a = Acc {
                count: 0,
                sum: 0,
                min: i64::MAX,
                max: i64::MIN,
                saturated: sat >> i & 1 == 1,
            };
            let v = word(off);
            match m.func {
                AggFn::Count => a.count = v,
                AggFn::Min => a.min = v as i64,
                AggFn::Max => a.max = v as i64,
                AggFn::Sum => a.sum = v as i64,
                AggFn::Avg => {
                    a.sum = v as i64;
                    a.count = word(off + 8);
                }
            }
            off += m.func.partial_bytes();
            accs.push(a);
        }
        Ok(GroupRow {
            key: b[..key_bytes].to_vec(),
            accs,
        })
    }

    pub fn finalize(&self, spec: &AggregateSpec) -> Vec<AggValue> {
        spec.measures
            .iter()
            .zip(&self.accs)
            .map(|(m, a)| match m.func {
                AggFn::Count => AggValue::Int(a.count as i64),
                AggFn::Min => AggValue::Int(a.min),
                AggFn::Max => AggValue::Int(a.max),
                AggFn::Sum => AggValue::Int(a.sum),
                AggFn::Avg => AggValue::Float(a.sum as f64 / a.count as f64),
            })
            .collect()
    }
}

/// Blocking group-by with a write-through cache in front of the cuckoo tables.
/// Groups are flushed in first-insertion order.
pub struct GroupBy<'s> {
    spec: AggregateSpec,
    schema: &'s Schema,
    table: CuckooTableSet<usize>,
    cache: LruShiftRegister<(Box<[u8]>, usize)>,
    groups: Vec<GroupRow>,
    overflow: OverflowBuffer,
    key: Vec<u8>,
}

impl<'s> GroupBy<'s> {
    pub fn new(
        spec: AggregateSpec,
        schema: &'s Schema,
        cuckoo: CuckooConfig,
        cache_depth: usize,
        max_overflow: usize,
    ) -> Result<Self, OperatorError> {
        spec.validate(schema)?;
        let row_bytes = spec.row_bytes(spec.key_bytes(schema));
        Ok(GroupBy {
            spec,
            schema,
            table: CuckooTableSet::new(cuckoo),
            cache: LruShiftRegister::new(cache_depth),
            groups: Vec::new(),
            overflow: OverflowBuffer::new(row_bytes, max_overflow),
            key: Vec::new(),
        })
    }

    pub fn push(&mut self, row: &[u8]) -> Result<(), OperatorError> {
        self.key.clear();
        self.schema.project_into(row, self.spec.key_columns, &mut self.key);
        let key = &self.key[..];
        let idx = match self.cache.position(|(k, _)| **k == *key) {
            Some(pos) => Some(self.cache.promote(pos).1),
            None => {
                let found = self.table.get(key).copied();
                if let Some(i) = found {
                    self.cache.push((key.into(), i));
                }
                found
            }
        };
        let accs = GroupRow::row_accs(&self.spec, self.schema, row);
        let update = GroupRow { key: key.to_vec(), accs };
        match idx {
            Some(i) => self.groups[i].merge(&update),
            None => match self.table.insert(key, self.groups.len()) {
                Ok(()) => {
                    self.cache.push((key.into(), self.groups.len()));
                    self.groups.push(update);
                }
                Err(_) => {
                    let mut b = Vec::with_capacity(self.overflow.entry_bytes());
                    update.encode(&self.spec, &mut b);
                    self.overflow.push(&b)?;
                }
            },
        }
        Ok(())
    }

    /// Encoded groups in insertion order, and the overflow entries.
    pub fn finish(self) -> (Vec<GroupRow>, OverflowBuffer) {
        (self.groups, self.overflow)
    }

    pub fn spec(&self) -> &AggregateSpec {
        &self.spec
    }
}

pub fn group_by_stream(
    raw: &[u8],
    schema: &Schema,
    spec: &AggregateSpec,
    cuckoo: CuckooConfig,
    cache_depth: usize,
) -> Result<(Vec<GroupRow>, OverflowBuffer), OperatorError> {
    let mut g = GroupBy::new(spec.clone(), schema, cuckoo, cache_depth, usize::MAX)?;
    let ann = Annotations {
        group_flags: spec.key_columns,
        ..Default::default()
    };
    for t in parse_and_project(raw, schema, ann)? {
        g.push(t.bytes)?;
    }
    Ok(g.finish())
}

/// Combines group rows that share a key, keeping first-occurrence order.
pub fn merge_groups(rows: impl IntoIterator<Item = GroupRow>) -> Vec<GroupRow> {
    let mut index: std::collections::HashMap<Vec<u8>, usize> = std::collections::HashMap::new();
    let mut out: Vec<GroupRow> = Vec::new();
    for r in rows {
        match index.get(&r.key) {
            Some(&i) => out[i].merge(&r),
            None => {
                index.insert(r.key.clone(), out.len());
                out.push(r);
            }
        }
    }
    out
}
