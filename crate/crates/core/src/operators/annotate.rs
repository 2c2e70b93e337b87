use super::OperatorError;
use crate::schema::Schema;

/// Query flags copied onto every tuple.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Annotations {
    pub proj_flags: u64,
    pub sel_flags: u64,
    pub group_flags: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnnotatedTuple<'a> {
    pub bytes: &'a [u8],
    pub ann: Annotations,
}

impl<'a> AnnotatedTuple<'a> {
    pub fn column(&self, schema: &Schema, col: usize) -> &'a [u8] {
        schema.column(self.bytes, col)
    }

    pub fn columns(&self, schema: &Schema) -> Vec<&'a [u8]> {
        (0..schema.columns()).map(|c| self.column(schema, c)).collect()
    }
}

/// Splits `raw` into tuples of `schema` and annotates each one.
pub fn parse_and_project<'a>(
    raw: &'a [u8],
    schema: &Schema,
    ann: Annotations,
) -> Result<impl ExactSizeIterator<Item = AnnotatedTuple<'a>> + Clone + 'a, OperatorError> {
    for (name, m) in [("projection", ann.proj_flags), ("selection", ann.sel_flags), ("group", ann.group_flags)] {
        schema
            .check_mask(m)
            .map_err(|e| OperatorError::Argument(format!("{name} flags: {e}")))?;
    }
    let tb = schema.tuple_bytes();
    if raw.len() % tb != 0 {
        return Err(OperatorError::Parse(format!(
            "{} bytes is not a whole number of {tb}-byte tuples",
            raw.len()
        )));
    }
    Ok(raw.chunks_exact(tb).map(move |bytes| AnnotatedTuple { bytes, ann }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    #[test]
    fn one_tuple_of_eight_columns() {
        let s = Schema::uniform(8, 8);
        let raw = [7u8; 64];
        let t: Vec<_> = parse_and_project(&raw, &s, Annotations::default()).unwrap().collect();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].columns(&s).len(), 8);
        assert!(t[0].columns(&s).iter().all(|c| c.len() == 8));
    }

    #[test]
    fn empty_and_partial() {
        let s = Schema::uniform(2, 8);
        assert_eq!(parse_and_project(&[], &s, Annotations::default()).unwrap().len(), 0);
        assert!(matches!(
            parse_and_project(&[0; 17], &s, Annotations::default()),
            Err(OperatorError::Parse(_))
        ));
        let bad = Annotations {
            sel_flags: 0b100,
            ..Default::default()
        };
        assert!(parse_and_project(&[0; 16], &s, bad).is_err());
    }

    #[test]
    fn round_trip_random_tuples() {
        let s = Schema::new(vec![8, 4, 2, 1, 16, 8]).unwrap();
        let mut raw = vec![0u8; 10_000 * s.tuple_bytes()];
        rand_chacha::ChaCha8Rng::seed_from_u64(1).fill_bytes(&mut raw);
        let ann = Annotations {
            proj_flags: 0b101,
            sel_flags: 0b10,
            group_flags: 1,
        };
        let mut out = Vec::with_capacity(raw.len());
        for t in parse_and_project(&raw, &s, ann).unwrap() {
            assert_eq!(t.ann, ann);
            for c in t.columns(&s) {
                out.extend_from_slice(c);
            }
        }
        assert_eq!(out, raw);
    }
}
