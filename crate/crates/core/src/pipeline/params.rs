//! FARVIEW parameter words.
//!
//! word0: pipeline id in bits 0..16, bit 32 requests the remote-CPU path.
//!
//! | pipeline          | words                                                          | payload |
//! |-------------------|----------------------------------------------------------------|---------|
//! | select variants   | proj, sel, codes, constants...                                 |         |
//! | crypto select     | as select, then in key (2), in counter block (2), out key (2), out counter block (2) | |
//! | distinct          | proj, key                                                      |         |
//! | group by          | key, one `column << 8 \| fn` word per measure                   |         |
//! | regex             | proj, pattern length, string column                            | pattern |
//!
//! The codes word holds the combiner in nibble 0 and, for the i-th term in
//! ascending column order, the comparator in nibble 1+2i and the value type
//! in nibble 2+2i. Keys and counter blocks are 16 bytes read as two
//! little-endian words.

use crate::operators::{
    AggFn, AggregateSpec, Combiner, Comparator, CryptoParams, Measure, SelectionPredicate, Term, ValueType,
};
use crate::schema::{mask_columns, Schema};

pub const SELECT: u16 = 1;
pub const SELECT_VEC: u16 = 2;
pub const SMART_SELECT: u16 = 3;
pub const DISTINCT: u16 = 4;
pub const GROUP_BY: u16 = 5;
pub const REGEX: u16 = 6;
pub const CRYPTO_SELECT: u16 = 7;

pub const RCPU_FLAG: u64 = 1 << 32;
pub const MAX_TERMS: usize = 7;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("bad parameters: {0}")]
pub struct ParamError(pub String);

fn bad<T>(m: impl Into<String>) -> Result<T, ParamError> {
    Err(ParamError(m.into()))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Query {
    Select {
        proj: u64,
        predicate: SelectionPredicate,
    },
    Distinct {
        proj: u64,
        keys: u64,
    },
    GroupBy(AggregateSpec),
    Regex {
        proj: u64,
        column: usize,
        pattern: Vec<u8>,
    },
    /// Decrypt stored rows, select, and encrypt the packed response.
    CryptoSelect {
        proj: u64,
        predicate: SelectionPredicate,
        stored: CryptoParams,
        response: CryptoParams,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryKind {
    Select,
    Distinct,
    GroupBy,
    Regex,
    CryptoSelect,
}

impl Query {
    pub fn kind(&self) -> QueryKind {
        match self {
            Query::Select { .. } => QueryKind::Select,
            Query::Distinct { .. } => QueryKind::Distinct,
            Query::GroupBy(_) => QueryKind::GroupBy,
            Query::Regex { .. } => QueryKind::Regex,
            Query::CryptoSelect { .. } => QueryKind::CryptoSelect,
        }
    }

    /// Checks the query against the table layout before any data is read.
    pub fn validate(&self, schema: &Schema) -> Result<(), ParamError> {
        let check = |name: &str, m: u64| {
            schema
                .check_mask(m)
                .map_err(|e| ParamError(format!("{name}: {e}")))
        };
        let op = |e: crate::operators::OperatorError| ParamError(e.to_string());
        match self {
            Query::Select { proj, predicate } | Query::CryptoSelect { proj, predicate, .. } => {
                check("projection", *proj)?;
                if *proj == 0 {
                    return bad("empty projection");
                }
                predicate.validate(schema).map_err(op)?;
            }
            Query::Distinct { proj, keys } => {
                check("projection", *proj)?;
                crate::operators::check_distinct_keys(*proj, *keys).map_err(op)?;
            }
            Query::GroupBy(spec) => spec.validate(schema).map_err(op)?,
            Query::Regex { proj, column, pattern } => {
                check("projection", *proj)?;
                if *proj == 0 {
                    return bad("empty projection");
                }
                if *column >= schema.columns() || schema.width(*column) < 2 {
                    return bad(format!("column {column} cannot hold strings"));
                }
                crate::operators::Regex::from_bytes(pattern).map_err(op)?;
            }
        }
        Ok(())
    }

    /// Bytes of one response row for a table of `schema`.
    pub fn row_bytes(&self, schema: &Schema) -> usize {
        match self {
            Query::Select { proj, .. }
            | Query::Distinct { proj, .. }
            | Query::Regex { proj, .. }
            | Query::CryptoSelect { proj, .. } => schema.projected_bytes(*proj),
            Query::GroupBy(spec) => spec.row_bytes(spec.key_bytes(schema)),
        }
    }
}

/// A decoded FARVIEW request.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub pipeline: u16,
    pub rcpu: bool,
    pub query: Query,
}

pub fn kind_of_pipeline(id: u16) -> Option<QueryKind> {
    Some(match id {
        SELECT | SELECT_VEC | SMART_SELECT => QueryKind::Select,
        DISTINCT => QueryKind::Distinct,
        GROUP_BY => QueryKind::GroupBy,
        REGEX => QueryKind::Regex,
        CRYPTO_SELECT => QueryKind::CryptoSelect,
        _ => return None,
    })
}

fn encode_predicate(p: &SelectionPredicate, words: &mut Vec<u64>) -> Result<(), ParamError> {
    if p.terms.is_empty() || p.terms.len() > MAX_TERMS {
        return bad(format!("{} predicate terms, expected 1..={MAX_TERMS}", p.terms.len()));
    }
    let mut terms = p.terms.clone();
    terms.sort_by_key(|t| t.column);
    if terms.windows(2).any(|w| w[0].column == w[1].column) || terms.iter().any(|t| t.column >= 64) {
        return bad("each predicate column may appear once and must be below 64");
    }
    let sel = terms.iter().fold(0u64, |m, t| m | 1 << t.column);
    let mut codes = p.combiner as u64;
    for (i, t) in terms.iter().enumerate() {
        codes |= (t.cmp as u64) << (4 + 8 * i);
        codes |= (t.ty as u64) << (8 + 8 * i);
    }
    words.push(sel);
    words.push(codes);
    words.extend(terms.iter().map(|t| t.constant));
    Ok(())
}

fn decode_predicate(w: &[u64]) -> Result<(SelectionPredicate, usize), ParamError> {
    if w.len() < 2 {
        return bad("missing selection words");
    }
    let (sel, codes) = (w[0], w[1]);
    let cols: Vec<usize> = mask_columns(sel).collect();
    if cols.is_empty() || cols.len() > MAX_TERMS {
        return bad(format!("{} selected columns, expected 1..={MAX_TERMS}", cols.len()));
    }
    if w.len() < 2 + cols.len() {
        return bad("missing predicate constants");
    }
    let combiner = match codes & 0xf {
        0 => Combiner::And,
        1 => Combiner::Or,
        c => return bad(format!("combiner code {c}")),
    };
    if codes >> (4 + 8 * cols.len()) != 0 {
        return bad("codes for more terms than selected columns");
    }
    let mut terms = Vec::with_capacity(cols.len());
    for (i, &column) in cols.iter().enumerate() {
        let c = (codes >> (4 + 8 * i) & 0xf) as u8;
        let t = (codes >> (8 + 8 * i) & 0xf) as u8;
        terms.push(Term {
            column,
            cmp: Comparator::from_code(c).ok_or_else(|| ParamError(format!("comparator code {c}")))?,
            ty: ValueType::from_code(t).ok_or_else(|| ParamError(format!("value type code {t}")))?,
            constant: w[2 + i],
        });
    }
    Ok((SelectionPredicate::new(terms, combiner), 2 + cols.len()))
}

fn push_block(b: &[u8; 16], words: &mut Vec<u64>) {
    words.push(u64::from_le_bytes(b[..8].try_into().unwrap()));
    words.push(u64::from_le_bytes(b[8..].try_into().unwrap()));
}

fn read_block(w: &[u64]) -> [u8; 16] {
    let mut b = [0u8; 16];
    b[..8].copy_from_slice(&w[0].to_le_bytes());
    b[8..].copy_from_slice(&w[1].to_le_bytes());
    b
}

/// Parameter words and payload of a request.
pub fn encode_request(r: &Request) -> Result<(Vec<u64>, Vec<u8>), ParamError> {
    if kind_of_pipeline(r.pipeline) != Some(r.query.kind()) {
        return bad(format!("pipeline {} does not run {:?} queries", r.pipeline, r.query.kind()));
    }
    let mut w = vec![r.pipeline as u64 | if r.rcpu { RCPU_FLAG } else { 0 }];
    let mut payload = Vec::new();
    match &r.query {
        Query::Select { proj, predicate } => {
            w.push(*proj);
            encode_predicate(predicate, &mut w)?;
        }
        Query::CryptoSelect {
            proj,
            predicate,
            stored,
            response,
        } => {
            w.push(*proj);
            encode_predicate(predicate, &mut w)?;
            push_block(&stored.key, &mut w);
            push_block(&stored.counter_block(), &mut w);
            push_block(&response.key, &mut w);
            push_block(&response.counter_block(), &mut w);
        }
        Query::Distinct { proj, keys } => w.extend([*proj, *keys]),
        Query::GroupBy(spec) => {
            w.push(spec.key_columns);
            for m in &spec.measures {
                w.push((m.column as u64) << 8 | m.func as u64);
            }
        }
        Query::Regex { proj, column, pattern } => {
            w.extend([*proj, pattern.len() as u64, *column as u64]);
            payload = pattern.clone();
        }
    }
    if w.len() > crate::wire::MAX_PARAMS {
        return bad(format!("{} parameter words", w.len()));
    }
    Ok((w, payload))
}

pub fn decode_request(w: &[u64], payload: &[u8]) -> Result<Request, ParamError> {
    let Some(&w0) = w.first() else {
        return bad("no parameters");
    };
    if w0 & !(0xffff | RCPU_FLAG) != 0 {
        return bad(format!("reserved bits set in word 0: {w0:#x}"));
    }
    let pipeline = w0 as u16;
    let rcpu = w0 & RCPU_FLAG != 0;
    let kind = kind_of_pipeline(pipeline).ok_or_else(|| ParamError(format!("unknown pipeline {pipeline}")))?;
    let rest = &w[1..];
    let need = |n: usize| {
        if rest.len() < n {
            bad(format!("{} words for pipeline {pipeline}, need {n}", rest.len()))
        } else {
            Ok(())
        }
    };
    let exact = |used: usize| {
        if rest.len() != used {
            bad(format!("{} trailing parameter words", rest.len() as isize - used as isize))
        } else {
            Ok(())
        }
    };
    if kind != QueryKind::Regex && !payload.is_empty() {
        return bad("payload only carries regex patterns");
    }
    let query = match kind {
        QueryKind::Select => {
            need(1)?;
            let (predicate, used) = decode_predicate(&rest[1..])?;
            exact(1 + used)?;
            Query::Select {
                proj: rest[0],
                predicate,
            }
        }
        QueryKind::CryptoSelect => {
            need(1)?;
            let (predicate, used) = decode_predicate(&rest[1..])?;
            need(1 + used + 8)?;
            exact(1 + used + 8)?;
            let c = &rest[1 + used..];
            Query::CryptoSelect {
                proj: rest[0],
                predicate,
                stored: CryptoParams::from_counter_block(read_block(&c[0..2]), read_block(&c[2..4])),
                response: CryptoParams::from_counter_block(read_block(&c[4..6]), read_block(&c[6..8])),
            }
        }
        QueryKind::Distinct => {
            need(2)?;
            exact(2)?;
            Query::Distinct {
                proj: rest[0],
                keys: rest[1],
            }
        }
        QueryKind::GroupBy => {
            need(1)?;
            let measures = rest[1..]
                .iter()
                .map(|&m| {
                    let f = (m & 0xff) as u8;
                    Ok(Measure {
                        column: usize::try_from(m >> 8).map_err(|_| ParamError("measure column".into()))?,
                        func: AggFn::from_code(f).ok_or_else(|| ParamError(format!("aggregate code {f}")))?,
                    })
                })
                .collect::<Result<Vec<_>, ParamError>>()?;
            Query::GroupBy(AggregateSpec {
                key_columns: rest[0],
                measures,
            })
        }
        QueryKind::Regex => {
            need(3)?;
            exact(3)?;
            if rest[1] != payload.len() as u64 {
                return bad(format!("pattern length {} but {} payload bytes", rest[1], payload.len()));
            }
            Query::Regex {
                proj: rest[0],
                column: usize::try_from(rest[2]).map_err(|_| ParamError("string column".into()))?,
                pattern: payload.to_vec(),
            }
        }
    };
    Ok(Request { pipeline, rcpu, query })
}
