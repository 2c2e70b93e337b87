use std::cmp::Ordering;

use super::{read_int, read_uint, AnnotatedTuple, OperatorError};
use crate::schema::Schema;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Comparator {
    Lt = 0,
    Le = 1,
    Eq = 2,
    Ge = 3,
    Gt = 4,
    Ne = 5,
}

impl Comparator {
    pub const ALL: [Comparator; 6] = [
        Comparator::Lt,
        Comparator::Le,
        Comparator::Eq,
        Comparator::Ge,
        Comparator::Gt,
        Comparator::Ne,
    ];

    pub fn from_code(c: u8) -> Option<Comparator> {
        Self::ALL.get(c as usize).copied()
    }

    /// `None` stands for an unordered (NaN) comparison.
    fn holds(self, ord: Option<Ordering>) -> bool {
        use Ordering::*;
        match (self, ord) {
            (Comparator::Ne, None) => true,
            (_, None) => false,
            (Comparator::Lt, Some(o)) => o == Less,
            (Comparator::Le, Some(o)) => o != Greater,
            (Comparator::Eq, Some(o)) => o == Equal,
            (Comparator::Ge, Some(o)) => o != Less,
            (Comparator::Gt, Some(o)) => o == Greater,
            (Comparator::Ne, Some(o)) => o != Equal,
        }
    }

    pub fn symbol(self) -> &'static str {
        ["<", "<=", "=", ">=", ">", "!="][self as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ValueType {
    Signed = 0,
    Unsigned = 1,
    /// binary64 for 8-byte columns, binary32 widened for 4-byte ones.
    Float = 2,
}

impl ValueType {
    pub fn from_code(c: u8) -> Option<ValueType> {
        [ValueType::Signed, ValueType::Unsigned, ValueType::Float]
            .get(c as usize)
            .copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Term {
    pub column: usize,
    pub cmp: Comparator,
    pub ty: ValueType,
    /// Raw 64 bits; a float constant is stored as its binary64 bits.
    pub constant: u64,
}

impl Term {
    pub fn int(column: usize, cmp: Comparator, c: i64) -> Term {
        Term {
            column,
            cmp,
            ty: ValueType::Signed,
            constant: c as u64,
        }
    }

    pub fn uint(column: usize, cmp: Comparator, c: u64) -> Term {
        Term {
            column,
            cmp,
            ty: ValueType::Unsigned,
            constant: c,
        }
    }

    pub fn float(column: usize, cmp: Comparator, c: f64) -> Term {
        Term {
            column,
            cmp,
            ty: ValueType::Float,
            constant: c.to_bits(),
        }
    }

    pub fn eval(&self, col: &[u8]) -> bool {
        let ord = match self.ty {
            ValueType::Signed => Some(read_int(col).cmp(&(self.constant as i64))),
            ValueType::Unsigned => Some(read_uint(col).cmp(&self.constant)),
            ValueType::Float => {
                let v = if col.len() == 4 {
                    f32::from_bits(read_uint(col) as u32) as f64
                } else {
                    f64::from_bits(read_uint(col))
                };
                v.partial_cmp(&f64::from_bits(self.constant))
            }
        };
        self.cmp.holds(ord)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Combiner {
    And = 0,
    Or = 1,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionPredicate {
    pub terms: Vec<Term>,
    pub combiner: Combiner,
}

impl SelectionPredicate {
    pub fn new(terms: Vec<Term>, combiner: Combiner) -> SelectionPredicate {
        SelectionPredicate { terms, combiner }
    }

    pub fn single(t: Term) -> SelectionPredicate {
        SelectionPredicate::new(vec![t], Combiner::And)
    }

    /// Mask of the columns the predicate reads.
    pub fn columns(&self) -> u64 {
        self.terms.iter().fold(0, |m, t| m | 1u64 << t.column)
    }

    pub fn validate(&self, schema: &Schema) -> Result<(), OperatorError> {
        if self.terms.is_empty() {
            return Err(OperatorError::Argument("predicate without terms".into()));
        }
        for t in &self.terms {
            if t.column >= schema.columns() {
                return Err(OperatorError::Argument(format!(
                    "predicate column {} beyond {}",
                    t.column,
                    schema.columns()
                )));
            }
            let w = schema.width(t.column);
            let ok = match t.ty {
                ValueType::Float => w == 4 || w == 8,
                _ => matches!(w, 1 | 2 | 4 | 8),
            };
            if !ok {
                return Err(OperatorError::Argument(format!(
                    "{:?} comparison on a {w}-byte column",
                    t.ty
                )));
            }
        }
        Ok(())
    }

    pub fn eval_row(&self, schema: &Schema, row: &[u8]) -> bool {
        let mut terms = self.terms.iter().map(|t| t.eval(schema.column(row, t.column)));
        match self.combiner {
            Combiner::And => terms.all(|b| b),
            Combiner::Or => terms.any(|b| b),
        }
    }
}

pub fn eval_predicate(t: &AnnotatedTuple<'_>, schema: &Schema, p: &SelectionPredicate) -> bool {
    p.eval_row(schema, t.bytes)
}
