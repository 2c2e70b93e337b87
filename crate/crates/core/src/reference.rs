//! Plain CPU evaluation of pipeline queries: linear scans and hash maps.
//! Used by the remote-CPU path of the node and the local-CPU baseline.

use std::collections::{HashMap, HashSet};

use crate::operators::{aes_ctr_transform, read_int, string_slot, Acc, AggFn, GroupRow, Regex};
use crate::pipeline::params::{ParamError, Query};
use crate::schema::Schema;

/// Response rows of `query` over plaintext `table`, in first-occurrence order.
/// Group rows carry partial aggregates in their wire encoding.
pub fn evaluate(query: &Query, schema: &Schema, table: &[u8]) -> Result<Vec<Vec<u8>>, ParamError> {
    query.validate(schema)?;
    let tb = schema.tuple_bytes();
    if table.len() % tb != 0 {
        return Err(ParamError(format!("{} bytes is not a whole number of tuples", table.len())));
    }
    let project = |row: &[u8], mask: u64| {
        let mut o = Vec::with_capacity(schema.projected_bytes(mask));
        schema.project_into(row, mask, &mut o);
        o
    };
    let mut out = Vec::new();
    match query {
        Query::Select { proj, predicate } => {
            for row in table.chunks_exact(tb) {
                if predicate.eval_row(schema, row) {
                    out.push(project(row, *proj));
                }
            }
        }
        Query::CryptoSelect {
            proj,
            predicate,
            stored,
            ..
        } => {
            let plain = aes_ctr_transform(table, stored);
            for row in plain.chunks_exact(tb) {
                if predicate.eval_row(schema, row) {
                    out.push(project(row, *proj));
                }
            }
        }
        Query::Distinct { proj, keys } => {
            let mut seen = HashSet::new();
            for row in table.chunks_exact(tb) {
                if seen.insert(project(row, *keys)) {
                    out.push(project(row, *proj));
                }
            }
        }
        Query::Regex { proj, column, pattern } => {
            let re = Regex::from_bytes(pattern).map_err(|e| ParamError(e.to_string()))?;
            for row in table.chunks_exact(tb) {
                if re.is_match(string_slot(schema.column(row, *column))) {
                    out.push(project(row, *proj));
                }
            }
        }
        Query::GroupBy(spec) => {
            struct Group {
                count: u64,
                sums: Vec<i128>,
                mins: Vec<i64>,
                maxs: Vec<i64>,
            }
            let m = spec.measures.len();
            let mut order: Vec<Vec<u8>> = Vec::new();
            let mut groups: HashMap<Vec<u8>, Group> = HashMap::new();
            for row in table.chunks_exact(tb) {
                let key = project(row, spec.key_columns);
                let g = groups.entry(key.clone()).or_insert_with(|| {
                    order.push(key);
                    Group {
                        count: 0,
                        sums: vec![0; m],
                        mins: vec![i64::MAX; m],
                        maxs: vec![i64::MIN; m],
                    }
                });
                g.count += 1;
                for (i, ms) in spec.measures.iter().enumerate() {
                    let v = read_int(schema.column(row, ms.column));
                    g.sums[i] += v as i128;
                    g.mins[i] = g.mins[i].min(v);
                    g.maxs[i] = g.maxs[i].max(v);
                }
            }
            for key in order {
                let g = &groups[&key];
                let accs = (0..m)
                    .map(|i| {
                        let sum = g.sums[i].clamp(i64::MIN as i128, i64::MAX as i128) as i64;
                        Acc {
                            count: g.count,
                            sum,
                            min: g.mins[i],
                            max: g.maxs[i],
                            saturated: sum as i128 != g.sums[i]
                                && matches!(spec.measures[i].func, AggFn::Sum | AggFn::Avg),
                        }
                    })
                    .collect();
                let mut b = Vec::new();
                GroupRow { key, accs }.encode(spec, &mut b);
                out.push(b);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{AggregateSpec, Comparator, Measure, SelectionPredicate, Term};

    #[test]
    fn hand_checked_queries() {
        let s = Schema::uniform(2, 8);
        let t: Vec<u8> = [(1i64, 10i64), (2, 5), (1, 3)]
            .iter()
            .flat_map(|(a, b)| a.to_le_bytes().into_iter().chain(b.to_le_bytes()))
            .collect();
        let sel = Query::Select {
            proj: 0b10,
            predicate: SelectionPredicate::single(Term::int(1, Comparator::Gt, 4)),
        };
        assert_eq!(evaluate(&sel, &s, &t).unwrap(), vec![10i64.to_le_bytes().to_vec(), 5i64.to_le_bytes().to_vec()]);
        let d = Query::Distinct { proj: 1, keys: 1 };
        assert_eq!(evaluate(&d, &s, &t).unwrap().len(), 2);
        let spec = AggregateSpec {
            key_columns: 1,
            measures: vec![Measure { column: 1, func: AggFn::Sum }],
        };
        let g = evaluate(&Query::GroupBy(spec.clone()), &s, &t).unwrap();
        let r = GroupRow::decode(&spec, 8, &g[0]).unwrap();
        assert_eq!((r.key, r.accs[0].sum), (1i64.to_le_bytes().to_vec(), 13));
        assert!(evaluate(&sel, &s, &t[..20]).is_err());
    }
}
