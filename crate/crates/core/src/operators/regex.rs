//! Byte-oriented regular expressions compiled to an NFA and run as a
//! Pike-style simulation (no backtracking, linear in the input).
//!
//! Supported: literals, `.` (any byte but `\n`), `*` `+` `?` (lazy forms
//! accepted, same match set), `[...]` classes with ranges and negation,
//! `\d \w \s` and their negations, `|`, `(...)`, `^` and `$` anchored at the
//! haystack ends. A match anywhere in the input counts.

use super::OperatorError;

#[derive(Debug, Clone, PartialEq, Eq)]
enum Node {
    Empty,
    Class(Box<ByteSet>),
    Concat(Vec<Node>),
    Alt(Vec<Node>),
    Repeat { node: Box<Node>, min: u8, many: bool },
    Start,
    End,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ByteSet([u64; 4]);

impl ByteSet {
    fn empty() -> ByteSet {
        ByteSet([0; 4])
    }

    fn single(b: u8) -> ByteSet {
        let mut s = ByteSet::empty();
        s.insert(b);
        s
    }

    fn insert(&mut self, b: u8) {
        self.0[b as usize >> 6] |= 1 << (b & 63);
    }

    fn insert_range(&mut self, lo: u8, hi: u8) {
        for b in lo..=hi {
            self.insert(b);
        }
    }

    fn union(&mut self, o: &ByteSet) {
        for i in 0..4 {
            self.0[i] |= o.0[i];
        }
    }

    fn negate(&mut self) {
        for w in &mut self.0 {
            *w = !*w;
        }
    }

    fn contains(&self, b: u8) -> bool {
        self.0[b as usize >> 6] >> (b & 63) & 1 == 1
    }
}

fn perl_class(c: u8) -> Option<ByteSet> {
    let mut s = ByteSet::empty();
    match c.to_ascii_lowercase() {
        b'd' => s.insert_range(b'0', b'9'),
        b'w' => {
            s.insert_range(b'0', b'9');
            s.insert_range(b'a', b'z');
            s.insert_range(b'A', b'Z');
            s.insert(b'_');
        }
        b's' => {
            for b in [b' ', b'\t', b'\n', b'\r', 0x0b, 0x0c] {
                s.insert(b);
            }
        }
        _ => return None,
    }
    if c.is_ascii_uppercase() {
        s.negate();
    }
    Some(s)
}

struct Parser<'a> {
    p: &'a [u8],
    i: usize,
    depth: usize,
}

const MAX_NESTING: usize = 64;

impl Parser<'_> {
    fn err(&self, m: &str) -> OperatorError {
        OperatorError::Pattern(format!("{m} at offset {}", self.i))
    }

    fn peek(&self) -> Option<u8> {
        self.p.get(self.i).copied()
    }

    fn alt(&mut self) -> Result<Node, OperatorError> {
        let mut branches = vec![self.concat()?];
        while self.peek() == Some(b'|') {
            self.i += 1;
            branches.push(self.concat()?);
        }
        Ok(if branches.len() == 1 {
            branches.pop().unwrap()
        } else {
            Node::Alt(branches)
        })
    }

    fn concat(&mut self) -> Result<Node, OperatorError> {
        let mut items = Vec::new();
        while let Some(c) = self.peek() {
            if c == b'|' || c == b')' {
                break;
            }
            let atom = self.atom()?;
            items.push(self.repeat(atom)?);
        }
        Ok(match items.len() {
            0 => Node::Empty,
            1 => items.pop().unwrap(),
            _ => Node::Concat(items),
        })
    }

    fn repeat(&mut self, atom: Node) -> Result<Node, OperatorError> {
        let (min, many) = match self.peek() {
            Some(b'*') => (0, true),
            Some(b'+') => (1, true),
            Some(b'?') => (0, false),
            Some(b'{') => return Err(self.err("counted repetition is not supported")),
            _ => return Ok(atom),
        };
        if matches!(atom, Node::Start | Node::End) {
            return Err(self.err("repetition of an anchor"));
        }
        self.i += 1;
        if self.peek() == Some(b'?') {
            self.i += 1;
        }
        if matches!(self.peek(), Some(b'*' | b'+' | b'?')) {
            return Err(self.err("nested repetition"));
        }
        Ok(Node::Repeat {
            node: Box::new(atom),
            min,
            many,
        })
    }

    fn atom(&mut self) -> Result<Node, OperatorError> {
        let c = self.peek().unwrap();
        self.i += 1;
        Ok(match c {
            b'(' => {
                self.depth += 1;
                if self.depth > MAX_NESTING {
                    return Err(self.err("groups nested too deeply"));
                }
                if self.p[self.i..].starts_with(b"?:") {
                    self.i += 2;
                } else if self.peek() == Some(b'?') {
                    return Err(self.err("group flags are not supported"));
                }
                let inner = self.alt()?;
                if self.peek() != Some(b')') {
                    return Err(self.err("unclosed group"));
                }
                self.i += 1;
                self.depth -= 1;
                inner
            }
            b'*' | b'+' | b'?' => return Err(self.err("repetition without operand")),
            b'{' => return Err(self.err("counted repetition is not supported")),
            b'[' => Node::Class(Box::new(self.class()?)),
            b'.' => {
                let mut s = ByteSet::single(b'\n');
                s.negate();
                Node::Class(Box::new(s))
            }
            b'^' => Node::Start,
            b'$' => Node::End,
            b'\\' => Node::Class(Box::new(self.escape()?)),
            c => Node::Class(Box::new(ByteSet::single(c))),
        })
    }

    /// Escape after the backslash, as a byte set.
    fn escape(&mut self) -> Result<ByteSet, OperatorError> {
        let c = self.peek().ok_or_else(|| self.err("trailing backslash"))?;
        self.i += 1;
        if let Some(s) = perl_class(c) {
            return Ok(s);
        }
        let b = match c {
            b'n' => b'\n',
            b't' => b'\t',
            b'r' => b'\r',
            c if c.is_ascii_punctuation() => c,
            _ => return Err(self.err("unsupported escape")),
        };
        Ok(ByteSet::single(b))
    }

    fn class(&mut self) -> Result<ByteSet, OperatorError> {
        let mut set = ByteSet::empty();
        let negated = self.peek() == Some(b'^');
        if negated {
            self.i += 1;
        }
        let mut first = true;
        loop {
            let c = self.peek().ok_or_else(|| self.err("unclosed class"))?;
            if c == b']' && !first {
                self.i += 1;
                break;
            }
            if c == b'[' && self.p.get(self.i + 1) == Some(&b':') {
                return Err(self.err("named classes are not supported"));
            }
            first = false;
            self.i += 1;
            let lo = if c == b'\\' {
                let e = self.escape()?;
                if e.0.iter().map(|w| w.count_ones()).sum::<u32>() != 1 {
                    set.union(&e);
                    continue;
                }
                (0..=255u8).find(|&b| e.contains(b)).unwrap()
            } else {
                c
            };
            if self.peek() == Some(b'-') && self.p.get(self.i + 1).is_some_and(|&n| n != b']') {
                self.i += 1;
                let h = self.peek().unwrap();
                self.i += 1;
                let hi = if h == b'\\' {
                    let e = self.escape()?;
                    if e.0.iter().map(|w| w.count_ones()).sum::<u32>() != 1 {
                        return Err(self.err("class as range bound"));
                    }
                    (0..=255u8).find(|&b| e.contains(b)).unwrap()
                } else {
                    h
                };
                if hi < lo {
                    return Err(self.err("inverted range"));
                }
                set.insert_range(lo, hi);
            } else {
                set.insert(lo);
            }
        }
        if negated {
            set.negate();
        }
        Ok(set)
    }
}

#[derive(Debug, Clone)]
enum Inst {
    Byte(u8),
    Set(Box<ByteSet>),
    Split(usize, usize),
    Jmp(usize),
    AssertStart,
    AssertEnd,
    Match,
}

fn compile(n: &Node, prog: &mut Vec<Inst>) {
    match n {
        Node::Empty => {}
        Node::Class(s) => {
            let ones: u32 = s.0.iter().map(|w| w.count_ones()).sum();
            if ones == 1 {
                prog.push(Inst::Byte((0..=255u8).find(|&b| s.contains(b)).unwrap()));
            } else {
                prog.push(Inst::Set(s.clone()));
            }
        }
        Node::Concat(items) => items.iter().for_each(|i| compile(i, prog)),
        Node::Alt(branches) => {
            let mut jumps = Vec::new();
            for (k, b) in branches.iter().enumerate() {
                if k + 1 < branches.len() {
                    let split = prog.len();
                    prog.push(Inst::Split(split + 1, 0));
                    compile(b, prog);
                    jumps.push(prog.len());
                    prog.push(Inst::Jmp(0));
                    let next = prog.len();
                    prog[split] = Inst::Split(split + 1, next);
                } else {
                    compile(b, prog);
                }
            }
            let end = prog.len();
            for j in jumps {
                prog[j] = Inst::Jmp(end);
            }
        }
        Node::Repeat { node, min, many } => {
            if *min == 1 {
                compile(node, prog);
            }
            if *many {
                // L: split body, out; body; jmp L
                let split = prog.len();
                prog.push(Inst::Split(0, 0));
                compile(node, prog);
                prog.push(Inst::Jmp(split));
                let out = prog.len();
                prog[split] = Inst::Split(split + 1, out);
            } else {
                let split = prog.len();
                prog.push(Inst::Split(0, 0));
                compile(node, prog);
                let out = prog.len();
                prog[split] = Inst::Split(split + 1, out);
            }
        }
        Node::Start => prog.push(Inst::AssertStart),
        Node::End => prog.push(Inst::AssertEnd),
    }
}

#[derive(Debug, Clone)]
pub struct Regex {
    prog: Vec<Inst>,
    pattern: String,
}

impl Regex {
    pub fn new(pattern: &str) -> Result<Regex, OperatorError> {
        Self::from_bytes(pattern.as_bytes())
    }

    pub fn from_bytes(pattern: &[u8]) -> Result<Regex, OperatorError> {
        let mut p = Parser { p: pattern, i: 0, depth: 0 };
        let ast = p.alt()?;
        if p.i != pattern.len() {
            return Err(p.err("unmatched ')'"));
        }
        let mut prog = Vec::new();
        compile(&ast, &mut prog);
        prog.push(Inst::Match);
        Ok(Regex {
            prog,
            pattern: String::from_utf8_lossy(pattern).into_owned(),
        })
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    /// Whether the pattern matches anywhere in `hay`.
    pub fn is_match(&self, hay: &[u8]) -> bool {
        let n = self.prog.len();
        let mut clist = Threads::new(n);
        let mut nlist = Threads::new(n);
        for pos in 0..=hay.len() {
            // A new attempt starts at every position.
            if self.add(&mut clist, 0, pos, hay.len()) {
                return true;
            }
            let Some(&b) = hay.get(pos) else { break };
            nlist.clear();
            for k in 0..clist.len {
                let pc = clist.dense[k];
                let ok = match &self.prog[pc] {
                    Inst::Byte(c) => *c == b,
                    Inst::Set(s) => s.contains(b),
                    _ => false,
                };
                if ok && self.add(&mut nlist, pc + 1, pos + 1, hay.len()) {
                    return true;
                }
            }
            std::mem::swap(&mut clist, &mut nlist);
        }
        false
    }

    /// Follows epsilon edges from `pc`. Returns true on reaching `Match`.
    fn add(&self, list: &mut Threads, pc: usize, pos: usize, len: usize) -> bool {
        let mut stack = vec![pc];
        while let Some(pc) = stack.pop() {
            if !list.insert(pc) {
                continue;
            }
            match self.prog[pc] {
                Inst::Match => return true,
                Inst::Jmp(t) => stack.push(t),
                Inst::Split(a, b) => {
                    stack.push(b);
                    stack.push(a);
                }
                Inst::AssertStart if pos == 0 => stack.push(pc + 1),
                Inst::AssertEnd if pos == len => stack.push(pc + 1),
                _ => {}
            }
        }
        false
    }
}

/// Sparse set of program counters.
struct Threads {
    dense: Vec<usize>,
    sparse: Vec<usize>,
    len: usize,
}

impl Threads {
    fn new(n: usize) -> Self {
        Threads {
            dense: vec![0; n],
            sparse: vec![0; n],
            len: 0,
        }
    }

    fn clear(&mut self) {
        self.len = 0;
    }

    fn insert(&mut self, pc: usize) -> bool {
        let s = self.sparse[pc];
        if s < self.len && self.dense[s] == pc {
            return false;
        }
        self.sparse[pc] = self.len;
        self.dense[self.len] = pc;
        self.len += 1;
        true
    }
}

/// Filters `strings` with `engines` matcher instances fed round-robin; the
/// results are merged back in input order.
pub fn regex_match_stream<'a>(strings: &[&'a [u8]], re: &Regex, engines: usize) -> Vec<&'a [u8]> {
    assert!(engines >= 1);
    let units: Vec<Regex> = (0..engines).map(|_| re.clone()).collect();
    let verdicts: Vec<Vec<bool>> = units
        .iter()
        .enumerate()
        .map(|(e, u)| strings.iter().skip(e).step_by(engines).map(|s| u.is_match(s)).collect())
        .collect();
    strings
        .iter()
        .enumerate()
        .filter(|(i, _)| verdicts[i % engines][i / engines])
        .map(|(_, s)| *s)
        .collect()
}
