use super::{eval_predicate, AnnotatedTuple, SelectionPredicate};
const CHANNEL_WORD: usize = crate::memory::CHANNEL_WORD as usize;
use crate::schema::Schema;

pub fn select_stream<'a>(
    tuples: impl IntoIterator<Item = AnnotatedTuple<'a>>,
    schema: &Schema,
    p: &SelectionPredicate,
) -> Vec<AnnotatedTuple<'a>> {
    tuples.into_iter().filter(|t| eval_predicate(t, schema, p)).collect()
}

/// Round-robin dispatch to `lanes` selection units and an order-restoring
/// round-robin merge. Each lane reports one slot per dispatched tuple, empty
/// when the tuple was dropped, so the merge never reorders.
pub fn vectorized_select<'a>(
    tuples: impl IntoIterator<Item = AnnotatedTuple<'a>>,
    schema: &Schema,
    p: &SelectionPredicate,
    lanes: usize,
) -> Vec<AnnotatedTuple<'a>> {
    assert!(lanes >= 1);
    let mut inputs: Vec<Vec<AnnotatedTuple<'a>>> = vec![Vec::new(); lanes];
    for (i, t) in tuples.into_iter().enumerate() {
        inputs[i % lanes].push(t);
    }
    let outputs: Vec<Vec<Option<AnnotatedTuple<'a>>>> = inputs
        .into_iter()
        .map(|lane| lane.into_iter().map(|t| eval_predicate(&t, schema, p).then_some(t)).collect())
        .collect();
    let mut iters: Vec<_> = outputs.into_iter().map(|o| o.into_iter()).collect();
    let mut out = Vec::new();
    'merge: loop {
        for it in iters.iter_mut() {
            match it.next() {
                Some(Some(t)) => out.push(t),
                Some(None) => {}
                None => break 'merge,
            }
        }
    }
    out
}

pub fn compute_lanes(channels: usize, tuple_bytes: usize) -> usize {
    assert!(tuple_bytes > 0);
    (channels * CHANNEL_WORD / tuple_bytes).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{parse_and_project, Annotations, Comparator, Term};
    use proptest::prelude::*;

    #[test]
    fn lane_counts() {
        assert_eq!(compute_lanes(2, 64), 2);
        assert_eq!(compute_lanes(1, 512), 1);
        assert_eq!(compute_lanes(4, 32), 8);
    }

    #[test]
    fn trivial_predicates() {
        let s = Schema::uniform(2, 8);
        let raw: Vec<u8> = (0u64..200).flat_map(|v| v.to_le_bytes()).collect();
        let ts: Vec<_> = parse_and_project(&raw, &s, Annotations::default()).unwrap().collect();
        let all = SelectionPredicate::single(Term::uint(0, Comparator::Ge, 0));
        let none = SelectionPredicate::single(Term::uint(0, Comparator::Lt, 0));
        assert_eq!(select_stream(ts.clone(), &s, &all), ts);
        assert!(select_stream(ts.clone(), &s, &none).is_empty());
        assert_eq!(vectorized_select(ts.clone(), &s, &all, 3), ts);
    }

    proptest! {
        #[test]
        fn lanes_are_transparent(vals in proptest::collection::vec(0u64..100, 0..500), lanes in 1usize..9, bound in 0u64..100) {
            let s = Schema::uniform(1, 8);
            let raw: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
            let ts: Vec<_> = parse_and_project(&raw, &s, Annotations::default()).unwrap().collect();
            let p = SelectionPredicate::single(Term::uint(0, Comparator::Lt, bound));
            prop_assert_eq!(vectorized_select(ts.clone(), &s, &p, lanes), select_stream(ts, &s, &p));
        }
    }
}
