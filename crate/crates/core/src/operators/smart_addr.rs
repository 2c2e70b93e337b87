use super::OperatorError;
const CHANNEL_WORD: usize = crate::memory::CHANNEL_WORD as usize;
use crate::schema::{mask_columns, Schema};

/// Byte-equivalent cost of issuing one extra memory request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModel {
    pub request_overhead: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { request_overhead: 256 }
    }
}

/// A contiguous range of a tuple, relative to the tuple start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WordRun {
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AccessPlan {
    FullScan,
    Words(Vec<WordRun>),
}

impl AccessPlan {
    /// Bytes fetched per tuple.
    pub fn fetched_bytes(&self, schema: &Schema) -> usize {
        match self {
            AccessPlan::FullScan => schema.tuple_bytes(),
            AccessPlan::Words(runs) => runs.iter().map(|r| r.len).sum(),
        }
    }
}

/// Word runs covering the columns in `mask`, adjacent words merged.
pub fn word_runs(schema: &Schema, mask: u64) -> Vec<WordRun> {
    let tb = schema.tuple_bytes();
    let words = tb.div_ceil(CHANNEL_WORD);
    let mut needed = vec![false; words];
    for c in mask_columns(mask) {
        let (start, end) = (schema.offset(c), schema.offset(c) + schema.width(c));
        for w in start / CHANNEL_WORD..end.div_ceil(CHANNEL_WORD) {
            needed[w] = true;
        }
    }
    let mut runs: Vec<WordRun> = Vec::new();
    for (w, _) in needed.iter().enumerate().filter(|(_, n)| **n) {
        let offset = w * CHANNEL_WORD;
        let len = CHANNEL_WORD.min(tb - offset);
        match runs.last_mut() {
            Some(r) if r.offset + r.len == offset => r.len += len,
            _ => runs.push(WordRun { offset, len }),
        }
    }
    runs
}

pub fn plan_smart_addressing(schema: &Schema, proj_flags: u64, cost: CostModel) -> Result<AccessPlan, OperatorError> {
    if proj_flags == 0 {
        return Err(OperatorError::Argument("no projected columns".into()));
    }
    schema
        .check_mask(proj_flags)
        .map_err(|e| OperatorError::Argument(e.to_string()))?;
    let runs = word_runs(schema, proj_flags);
    let fetched: u64 = runs.iter().map(|r| r.len as u64).sum();
    let sa_cost = runs.len() as u64 * cost.request_overhead + fetched;
    if sa_cost < schema.tuple_bytes() as u64 {
        Ok(AccessPlan::Words(runs))
    } else {
        Ok(AccessPlan::FullScan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wide_tuples_use_words() {
        let s = Schema::uniform(64, 8);
        let plan = plan_smart_addressing(&s, 0b111, CostModel::default()).unwrap();
        assert_eq!(plan, AccessPlan::Words(vec![WordRun { offset: 0, len: 64 }]));
        assert_eq!(plan.fetched_bytes(&s), 64);
    }

    #[test]
    fn narrow_tuples_scan() {
        let s = Schema::uniform(32, 8);
        assert_eq!(plan_smart_addressing(&s, 0b111, CostModel::default()).unwrap(), AccessPlan::FullScan);
        let s = Schema::uniform(64, 8);
        assert_eq!(
            plan_smart_addressing(&s, s.all_columns(), CostModel::default()).unwrap(),
            AccessPlan::FullScan
        );
        assert!(plan_smart_addressing(&s, 0, CostModel::default()).is_err());
    }

    #[test]
    fn runs_merge_and_split() {
        let s = Schema::uniform(64, 8);
        // Columns 0 and 8 sit in adjacent words, column 40 far away.
        let runs = word_runs(&s, 1 | 1 << 8 | 1 << 40);
        assert_eq!(
            runs,
            vec![WordRun { offset: 0, len: 128 }, WordRun { offset: 320, len: 64 }]
        );
        // A column straddling a word boundary needs both words.
        let s = Schema::new(vec![60, 8, 30]).unwrap();
        assert_eq!(word_runs(&s, 0b010), vec![WordRun { offset: 0, len: 98 }]);
    }

    proptest! {
        #[test]
        fn runs_cover_projection(widths in proptest::collection::vec(1u32..40, 1..30), mask: u64) {
            let s = Schema::new(widths).unwrap();
            let mask = mask & s.all_columns();
            let runs = word_runs(&s, mask);
            for c in mask_columns(mask) {
                let (a, b) = (s.offset(c), s.offset(c) + s.width(c));
                prop_assert!(runs.iter().any(|r| r.offset <= a && b <= r.offset + r.len));
            }
            for w in runs.windows(2) {
                prop_assert!(w[0].offset + w[0].len < w[1].offset);
            }
            for r in &runs {
                prop_assert_eq!(r.offset % CHANNEL_WORD, 0);
                prop_assert!(r.offset + r.len <= s.tuple_bytes());
            }
        }
    }
}
