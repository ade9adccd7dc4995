//! ISO 10303-21 emission of solid models and a reader for the same subset.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use crate::assembly::{check_watertight, EdgeUse, SolidModel, STITCH_TOL};
use crate::geom::{RigidTransform, Vec3};
use crate::nurbs::{Edge, KnotVector, NurbsCurve, NurbsSurface};
use crate::{Error, Result};

pub const SCHEMA: &str = "AUTOMOTIVE_DESIGN { 1 0 10303 214 1 1 1 1 }";
pub const MAGIC: &str = "ISO-10303-21;";
pub const TERMINATOR: &str = "END-ISO-10303-21;";

/// One Part 21 parameter.
#[derive(Clone, Debug, PartialEq)]
pub enum Param {
    Real(f64),
    Int(i64),
    Str(String),
    Enum(String),
    Ref(u64),
    List(Vec<Param>),
    /// Typed value such as `LENGTH_MEASURE(0.01)`.
    Typed(String, Box<Param>),
    /// `$`
    Unset,
    /// `*`
    Derived,
}

impl Param {
    pub fn str(s: &str) -> Param {
        Param::Str(s.into())
    }

    pub fn bool(b: bool) -> Param {
        Param::Enum(if b { "T" } else { "F" }.into())
    }

    pub fn refs(ids: impl IntoIterator<Item = u64>) -> Param {
        Param::List(ids.into_iter().map(Param::Ref).collect())
    }

    pub fn reals(xs: impl IntoIterator<Item = f64>) -> Param {
        Param::List(xs.into_iter().map(Param::Real).collect())
    }

    pub fn as_ref_id(&self) -> Option<u64> {
        match self {
            Param::Ref(r) => Some(*r),
            _ => None,
        }
    }

    pub fn as_real(&self) -> Option<f64> {
        match self {
            Param::Real(x) => Some(*x),
            Param::Int(i) => Some(*i as f64),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Param]> {
        match self {
            Param::List(l) => Some(l),
            _ => None,
        }
    }

    fn visit_refs(&self, f: &mut impl FnMut(u64)) {
        match self {
            Param::Ref(r) => f(*r),
            Param::List(l) => l.iter().for_each(|p| p.visit_refs(f)),
            Param::Typed(_, p) => p.visit_refs(f),
            _ => {}
        }
    }
}

/// `KEYWORD(args)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub type_name: String,
    pub args: Vec<Param>,
}

impl Record {
    pub fn new(type_name: &str, args: Vec<Param>) -> Self {
        Self { type_name: type_name.into(), args }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EntityBody {
    Simple(Record),
    /// Complex entity: partial records in alphabetical order.
    Complex(Vec<Record>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepEntity {
    pub id: u64,
    pub body: EntityBody,
}

impl StepEntity {
    /// The record of partial type `name`, for simple or complex entities.
    pub fn record(&self, name: &str) -> Option<&Record> {
        match &self.body {
            EntityBody::Simple(r) => (r.type_name == name).then_some(r),
            EntityBody::Complex(rs) => rs.iter().find(|r| r.type_name == name),
        }
    }

    pub fn type_name(&self) -> &str {
        match &self.body {
            EntityBody::Simple(r) => &r.type_name,
            EntityBody::Complex(rs) => rs.first().map_or("", |r| &r.type_name),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepDocument {
    pub header: Vec<Record>,
    pub entities: Vec<StepEntity>,
}

fn fmt_real(x: f64, out: &mut String) {
    let s = format!("{:.16E}", x);
    out.push_str(&s);
}

fn fmt_param(p: &Param, out: &mut String) {
    match p {
        Param::Real(x) => fmt_real(*x, out),
        Param::Int(i) => {
            let _ = write!(out, "{i}");
        }
        Param::Str(s) => {
            out.push('\'');
            out.push_str(&s.replace('\'', "''"));
            out.push('\'');
        }
        Param::Enum(e) => {
            let _ = write!(out, ".{e}.");
        }
        Param::Ref(r) => {
            let _ = write!(out, "#{r}");
        }
        Param::List(l) => {
            out.push('(');
            for (k, q) in l.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                fmt_param(q, out);
            }
            out.push(')');
        }
        Param::Typed(name, q) => {
            out.push_str(name);
            out.push('(');
            fmt_param(q, out);
            out.push(')');
        }
        Param::Unset => out.push('$'),
        Param::Derived => out.push('*'),
    }
}

fn fmt_record(r: &Record, out: &mut String) {
    out.push_str(&r.type_name);
    out.push('(');
    for (k, p) in r.args.iter().enumerate() {
        if k > 0 {
            out.push(',');
        }
        fmt_param(p, out);
    }
    out.push(')');
}

impl StepDocument {
    /// Clear-text encoding: one entity per line, LF endings, reals with 17
    /// significant digits.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push_str("\nHEADER;\n");
        for r in &self.header {
            fmt_record(r, &mut out);
            out.push_str(";\n");
        }
        out.push_str("ENDSEC;\nDATA;\n");
        for e in &self.entities {
            let _ = write!(out, "#{}=", e.id);
            match &e.body {
                EntityBody::Simple(r) => fmt_record(r, &mut out),
                EntityBody::Complex(rs) => {
                    out.push('(');
                    for (k, r) in rs.iter().enumerate() {
                        if k > 0 {
                            out.push(' ');
                        }
                        fmt_record(r, &mut out);
                    }
                    out.push(')');
                }
            }
            out.push_str(";\n");
        }
        out.push_str("ENDSEC;\n");
        out.push_str(TERMINATOR);
        out.push('\n');
        out.into_bytes()
    }

    pub fn entity(&self, id: u64) -> Option<&StepEntity> {
        self.index().get(&id).map(|&k| &self.entities[k])
    }

    fn index(&self) -> HashMap<u64, usize> {
        self.entities.iter().enumerate().map(|(k, e)| (e.id, k)).collect()
    }

    /// Number of entities that are, or contain, partial type `name`.
    pub fn count(&self, name: &str) -> usize {
        self.entities.iter().filter(|e| e.record(name).is_some()).count()
    }

    /// True when the reference graph has no cycles.
    pub fn is_acyclic(&self) -> bool {
        let index = self.index();
        // 0 unvisited, 1 on stack, 2 done
        let mut state = vec![0u8; self.entities.len()];
        for start in 0..self.entities.len() {
            if state[start] != 0 {
                continue;
            }
            let mut stack = vec![(start, self.children(start, &index), 0usize)];
            state[start] = 1;
            while let Some((node, kids, pos)) = stack.last_mut() {
                if *pos == kids.len() {
                    state[*node] = 2;
                    stack.pop();
                    continue;
                }
                let next = kids[*pos];
                *pos += 1;
                match state[next] {
                    1 => return false,
                    0 => {
                        state[next] = 1;
                        let k = self.children(next, &index);
                        stack.push((next, k, 0));
                    }
                    _ => {}
                }
            }
        }
        true
    }

    fn children(&self, k: usize, index: &HashMap<u64, usize>) -> Vec<usize> {
        let mut out = Vec::new();
        let mut push = |r: u64| {
            if let Some(&i) = index.get(&r) {
                out.push(i);
            }
        };
        match &self.entities[k].body {
            EntityBody::Simple(r) => r.args.iter().for_each(|p| p.visit_refs(&mut push)),
            EntityBody::Complex(rs) => rs.iter().flat_map(|r| &r.args).for_each(|p| p.visit_refs(&mut push)),
        }
        out
    }

    /// Reconstructs every B-spline surface entity, keyed by entity id.
    pub fn surfaces(&self) -> Result<Vec<(u64, NurbsSurface)>> {
        let index = self.index();
        let point = |p: &Param| -> Result<Vec3> {
            let id = p.as_ref_id().ok_or_else(|| bad("control point is not a reference"))?;
            let e = index.get(&id).map(|&k| &self.entities[k]).ok_or(Error::DanglingReference(id))?;
            let r = e.record("CARTESIAN_POINT").ok_or_else(|| bad("control point is not a CARTESIAN_POINT"))?;
            let c = r.args.get(1).and_then(Param::as_list).ok_or_else(|| bad("malformed CARTESIAN_POINT"))?;
            let x: Vec<f64> = c.iter().filter_map(Param::as_real).collect();
            if x.len() != 3 {
                return Err(bad("CARTESIAN_POINT needs three coordinates"));
            }
            Ok(Vec3::new(x[0], x[1], x[2]))
        };
        let mut out = Vec::new();
        for e in &self.entities {
            let (Some(bs), Some(kn)) = (e.record("B_SPLINE_SURFACE"), e.record("B_SPLINE_SURFACE_WITH_KNOTS")) else {
                continue;
            };
            let deg = |k: usize| bs.args.get(k).and_then(Param::as_real).map(|x| x as usize).ok_or_else(|| bad("degree"));
            let (du, dv) = (deg(0)?, deg(1)?);
            let rows = bs.args.get(2).and_then(Param::as_list).ok_or_else(|| bad("control point list"))?;
            let nu = rows.len();
            let nv = rows.first().and_then(Param::as_list).map_or(0, |r| r.len());
            let mut cps = Vec::with_capacity(nu * nv);
            for row in rows {
                let row = row.as_list().ok_or_else(|| bad("control point row"))?;
                if row.len() != nv {
                    return Err(bad("ragged control point list"));
                }
                for p in row {
                    cps.push(point(p)?);
                }
            }
            let reals = |k: usize| -> Result<Vec<f64>> {
                kn.args.get(k).and_then(Param::as_list).map(|l| l.iter().filter_map(Param::as_real).collect()).ok_or_else(|| bad("knot data"))
            };
            let expand = |mults: Vec<f64>, knots: Vec<f64>, deg: usize| -> Result<KnotVector> {
                let mut v = Vec::new();
                for (m, k) in mults.iter().zip(&knots) {
                    v.extend(std::iter::repeat(*k).take(*m as usize));
                }
                KnotVector::new(v, deg)
            };
            let ku = expand(reals(0)?, reals(2)?, du)?;
            let kv = expand(reals(1)?, reals(3)?, dv)?;
            let weights = match e.record("RATIONAL_B_SPLINE_SURFACE") {
                Some(r) => {
                    let rows = r.args.first().and_then(Param::as_list).ok_or_else(|| bad("weights"))?;
                    rows.iter().flat_map(|row| row.as_list().unwrap_or(&[]).iter().filter_map(Param::as_real)).collect()
                }
                None => vec![1.0; nu * nv],
            };
            out.push((e.id, NurbsSurface::new(ku, kv, cps, weights)?));
        }
        Ok(out)
    }
}

fn bad(msg: &str) -> Error {
    Error::Syntax { line: 0, col: 0, msg: msg.into() }
}

// ---------------------------------------------------------------- parsing

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Keyword(String),
    Id(u64),
    Real(f64),
    Int(i64),
    Str(String),
    Enum(String),
    Open,
    Close,
    Comma,
    Semi,
    Eq,
    Dollar,
    Star,
    Eof,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
    line: usize,
    col: usize,
}

impl<'a> Lexer<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Syntax { line: self.line, col: self.col, msg: msg.into() }
    }

    fn bump(&mut self) -> u8 {
        let c = self.src[self.pos];
        self.pos += 1;
        if c == b'\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        c
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn skip_space(&mut self) -> Result<()> {
        loop {
            match self.peek() {
                Some(c) if c.is_ascii_whitespace() => {
                    self.bump();
                }
                Some(b'/') if self.src.get(self.pos + 1) == Some(&b'*') => {
                    let (line, col) = (self.line, self.col);
                    self.bump();
                    self.bump();
                    loop {
                        match self.peek() {
                            None => return Err(Error::Syntax { line, col, msg: "unterminated comment".into() }),
                            Some(b'*') if self.src.get(self.pos + 1) == Some(&b'/') => {
                                self.bump();
                                self.bump();
                                break;
                            }
                            _ => {
                                self.bump();
                            }
                        }
                    }
                }
                _ => return Ok(()),
            }
        }
    }

    /// Next token with the position where it starts.
    fn next(&mut self) -> Result<(Tok, usize, usize)> {
        self.skip_space()?;
        let (line, col) = (self.line, self.col);
        let Some(c) = self.peek() else {
            return Ok((Tok::Eof, line, col));
        };
        let tok = match c {
            b'(' => {
                self.bump();
                Tok::Open
            }
            b')' => {
                self.bump();
                Tok::Close
            }
            b',' => {
                self.bump();
                Tok::Comma
            }
            b';' => {
                self.bump();
                Tok::Semi
            }
            b'=' => {
                self.bump();
                Tok::Eq
            }
            b'$' => {
                self.bump();
                Tok::Dollar
            }
            b'*' => {
                self.bump();
                Tok::Star
            }
            b'#' => {
                self.bump();
                let s = self.take_while(|c| c.is_ascii_digit());
                Tok::Id(s.parse().map_err(|_| Error::Syntax { line, col, msg: "bad entity id".into() })?)
            }
            b'\'' => {
                self.bump();
                let mut s = Vec::new();
                loop {
                    match self.peek() {
                        None => return Err(Error::Syntax { line, col, msg: "unterminated string".into() }),
                        Some(b'\'') => {
                            self.bump();
                            if self.peek() == Some(b'\'') {
                                self.bump();
                                s.push(b'\'');
                            } else {
                                break;
                            }
                        }
                        Some(_) => s.push(self.bump()),
                    }
                }
                Tok::Str(String::from_utf8(s).map_err(|_| Error::Syntax { line, col, msg: "non-ASCII string".into() })?)
            }
            b'.' => {
                self.bump();
                let s = self.take_while(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == b'_');
                if self.peek() != Some(b'.') || s.is_empty() {
                    return Err(self.err("malformed enumeration"));
                }
                self.bump();
                Tok::Enum(s)
            }
            b'+' | b'-' | b'0'..=b'9' => {
                let s = self.take_while(|c| c.is_ascii_digit() || matches!(c, b'+' | b'-' | b'.' | b'E' | b'e'));
                let err = || Error::Syntax { line, col, msg: format!("bad number '{s}'") };
                if s.contains('.') {
                    if !s.trim_start_matches(['+', '-']).starts_with(|c: char| c.is_ascii_digit()) {
                        return Err(err());
                    }
                    Tok::Real(s.parse().map_err(|_| err())?)
                } else {
                    Tok::Int(s.parse().map_err(|_| err())?)
                }
            }
            c if c.is_ascii_uppercase() => {
                let s = self.take_while(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == b'_' || c == b'-');
                Tok::Keyword(s)
            }
            _ => return Err(self.err(format!("unexpected character '{}'", c as char))),
        };
        Ok((tok, line, col))
    }

    fn take_while(&mut self, f: impl Fn(u8) -> bool) -> String {
        let start = self.pos;
        while self.peek().is_some_and(&f) {
            self.bump();
        }
        String::from_utf8_lossy(&self.src[start..self.pos]).into_owned()
    }
}

struct Parser<'a> {
    lex: Lexer<'a>,
    tok: Tok,
    line: usize,
    col: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a [u8]) -> Result<Self> {
        let mut lex = Lexer { src, pos: 0, line: 1, col: 1 };
        let (tok, line, col) = lex.next()?;
        Ok(Self { lex, tok, line, col })
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Syntax { line: self.line, col: self.col, msg: msg.into() }
    }

    fn advance(&mut self) -> Result<Tok> {
        let (tok, line, col) = self.lex.next()?;
        self.line = line;
        self.col = col;
        Ok(std::mem::replace(&mut self.tok, tok))
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<()> {
        if self.tok != want {
            return Err(self.err(format!("expected {what}")));
        }
        self.advance()?;
        Ok(())
    }

    fn keyword(&mut self, word: &str) -> Result<()> {
        self.expect(Tok::Keyword(word.into()), &format!("'{word}'"))
    }

    fn record(&mut self) -> Result<Record> {
        let Tok::Keyword(name) = self.tok.clone() else {
            return Err(self.err("expected entity keyword"));
        };
        self.advance()?;
        self.expect(Tok::Open, "'('")?;
        let args = self.params_until_close()?;
        Ok(Record { type_name: name, args })
    }

    /// Comma-separated parameters followed by ')', which is consumed.
    fn params_until_close(&mut self) -> Result<Vec<Param>> {
        let mut args = Vec::new();
        if self.tok == Tok::Close {
            self.advance()?;
            return Ok(args);
        }
        loop {
            args.push(self.param()?);
            match self.tok {
                Tok::Comma => {
                    self.advance()?;
                }
                Tok::Close => {
                    self.advance()?;
                    return Ok(args);
                }
                _ => return Err(self.err("expected ',' or ')'")),
            }
        }
    }

    /// One parameter, consumed entirely.
    fn param(&mut self) -> Result<Param> {
        let p = match self.tok.clone() {
            Tok::Real(x) => Param::Real(x),
            Tok::Int(i) => Param::Int(i),
            Tok::Str(s) => Param::Str(s),
            Tok::Enum(e) => Param::Enum(e),
            Tok::Id(r) => Param::Ref(r),
            Tok::Dollar => Param::Unset,
            Tok::Star => Param::Derived,
            Tok::Open => {
                self.advance()?;
                return Ok(Param::List(self.params_until_close()?));
            }
            Tok::Keyword(name) => {
                self.advance()?;
                self.expect(Tok::Open, "'(' after typed parameter")?;
                let inner = self.param()?;
                self.expect(Tok::Close, "')' closing typed parameter")?;
                return Ok(Param::Typed(name, Box::new(inner)));
            }
            _ => return Err(self.err("expected parameter")),
        };
        self.advance()?;
        Ok(p)
    }
}

/// Parses a Part 21 file of the subset written by `write_step`. Whitespace
/// and comments are free; the grammar is strict.
pub fn parse_step(bytes: &[u8]) -> Result<StepDocument> {
    let mut p = Parser::new(bytes)?;
    p.keyword("ISO-10303-21")?;
    p.expect(Tok::Semi, "';'")?;
    p.keyword("HEADER")?;
    p.expect(Tok::Semi, "';'")?;
    let mut header = Vec::new();
    while p.tok != Tok::Keyword("ENDSEC".into()) {
        header.push(p.record()?);
        p.expect(Tok::Semi, "';' after header record")?;
    }
    p.keyword("ENDSEC")?;
    p.expect(Tok::Semi, "';'")?;
    p.keyword("DATA")?;
    p.expect(Tok::Semi, "';'")?;
    let mut entities = Vec::new();
    let mut seen = HashSet::new();
    while let Tok::Id(id) = p.tok {
        if !seen.insert(id) {
            return Err(p.err(format!("duplicate entity #{id}")));
        }
        p.advance()?;
        p.expect(Tok::Eq, "'='")?;
        let body = if p.tok == Tok::Open {
            p.advance()?;
            let mut rs = Vec::new();
            while p.tok != Tok::Close {
                rs.push(p.record()?);
            }
            p.advance()?;
            if rs.is_empty() {
                return Err(p.err("empty complex entity"));
            }
            EntityBody::Complex(rs)
        } else {
            EntityBody::Simple(p.record()?)
        };
        p.expect(Tok::Semi, "';' after entity")?;
        entities.push(StepEntity { id, body });
    }
    p.keyword("ENDSEC")?;
    p.expect(Tok::Semi, "';'")?;
    p.keyword("END-ISO-10303-21")?;
    if p.tok != Tok::Semi {
        return Err(p.err("expected ';' after END-ISO-10303-21"));
    }
    p.advance()?;
    if p.tok != Tok::Eof {
        return Err(p.err("trailing content after END-ISO-10303-21;"));
    }
    let doc = StepDocument { header, entities };
    for e in &doc.entities {
        let mut missing = None;
        let mut check = |r: u64| {
            if missing.is_none() && !seen.contains(&r) {
                missing = Some(r);
            }
        };
        match &e.body {
            EntityBody::Simple(r) => r.args.iter().for_each(|a| a.visit_refs(&mut check)),
            EntityBody::Complex(rs) => rs.iter().flat_map(|r| &r.args).for_each(|a| a.visit_refs(&mut check)),
        }
        if let Some(r) = missing {
            return Err(Error::DanglingReference(r));
        }
    }
    Ok(doc)
}

// ---------------------------------------------------------------- writing

/// Header fields and the model tolerance.
#[derive(Clone, Debug)]
pub struct StepMeta {
    pub name: String,
    pub author: String,
    pub organization: String,
    /// Written as the length uncertainty of the model, in mm.
    pub tolerance: f64,
    /// Fixed so that identical models give identical files.
    pub timestamp: String,
}

impl StepMeta {
    pub fn new(name: &str, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            author: String::new(),
            organization: String::new(),
            tolerance,
            timestamp: "2000-01-01T00:00:00".into(),
        }
    }
}

#[derive(Default)]
struct Emitter {
    entities: Vec<StepEntity>,
}

impl Emitter {
    fn add(&mut self, type_name: &str, args: Vec<Param>) -> u64 {
        let id = self.entities.len() as u64 + 1;
        self.entities.push(StepEntity { id, body: EntityBody::Simple(Record::new(type_name, args)) });
        id
    }

    fn add_complex(&mut self, records: Vec<Record>) -> u64 {
        let id = self.entities.len() as u64 + 1;
        self.entities.push(StepEntity { id, body: EntityBody::Complex(records) });
        id
    }

    fn point(&mut self, p: &Vec3) -> u64 {
        self.add("CARTESIAN_POINT", vec![Param::str(""), Param::reals([p.x, p.y, p.z])])
    }

    fn direction(&mut self, d: &Vec3) -> u64 {
        self.add("DIRECTION", vec![Param::str(""), Param::reals([d.x, d.y, d.z])])
    }
}

fn knot_params(k: &KnotVector) -> (Param, Param) {
    let (values, mults) = k.distinct_with_multiplicities();
    (Param::List(mults.into_iter().map(|m| Param::Int(m as i64)).collect()), Param::reals(values))
}

fn emit_surface(em: &mut Emitter, s: &NurbsSurface) -> (u64, Vec<u64>) {
    let ids: Vec<u64> = s.control_points.iter().map(|p| em.point(p)).collect();
    let rows = Param::List((0..s.nu).map(|i| Param::refs(ids[i * s.nv..(i + 1) * s.nv].iter().copied())).collect());
    let weights =
        Param::List((0..s.nu).map(|i| Param::reals(s.weights[i * s.nv..(i + 1) * s.nv].iter().copied())).collect());
    let (mu, ku) = knot_params(&s.knots_u);
    let (mv, kv) = knot_params(&s.knots_v);
    let f = Param::bool(false);
    let id = em.add_complex(vec![
        Record::new("BOUNDED_SURFACE", vec![]),
        Record::new(
            "B_SPLINE_SURFACE",
            vec![
                Param::Int(s.degree_u() as i64),
                Param::Int(s.degree_v() as i64),
                rows,
                Param::Enum("UNSPECIFIED".into()),
                f.clone(),
                f.clone(),
                f,
            ],
        ),
        Record::new("B_SPLINE_SURFACE_WITH_KNOTS", vec![mu, mv, ku, kv, Param::Enum("UNSPECIFIED".into())]),
        Record::new("GEOMETRIC_REPRESENTATION_ITEM", vec![]),
        Record::new("RATIONAL_B_SPLINE_SURFACE", vec![weights]),
        Record::new("REPRESENTATION_ITEM", vec![Param::str("")]),
        Record::new("SURFACE", vec![]),
    ]);
    (id, ids)
}

/// Boundary curve of `s` along `edge`, sharing the surface's control points.
fn emit_boundary_curve(em: &mut Emitter, s: &NurbsSurface, edge: Edge, cp_ids: &[u64]) -> u64 {
    let c: NurbsCurve = s.boundary_curve(edge);
    let n = c.control_points.len();
    let refs = (0..n).map(|t| {
        let (i, j) = edge.index(t, 0, s.nu, s.nv);
        cp_ids[i * s.nv + j]
    });
    let (m, k) = knot_params(&c.knots);
    let f = Param::bool(false);
    em.add_complex(vec![
        Record::new("BOUNDED_CURVE", vec![]),
        Record::new(
            "B_SPLINE_CURVE",
            vec![Param::Int(c.knots.degree() as i64), Param::refs(refs), Param::Enum("UNSPECIFIED".into()), f.clone(), f],
        ),
        Record::new("B_SPLINE_CURVE_WITH_KNOTS", vec![m, k, Param::Enum("UNSPECIFIED".into())]),
        Record::new("CURVE", vec![]),
        Record::new("GEOMETRIC_REPRESENTATION_ITEM", vec![]),
        Record::new("RATIONAL_B_SPLINE_CURVE", vec![Param::reals(c.weights.iter().copied())]),
        Record::new("REPRESENTATION_ITEM", vec![Param::str("")]),
    ])
}

/// Edges of the outer loop, counter-clockwise about the face normal, with
/// whether each is traversed in increasing edge parameter.
pub fn loop_edges(same_sense: bool) -> [(Edge, bool); 4] {
    if same_sense {
        [(Edge::V0, true), (Edge::U1, true), (Edge::V1, false), (Edge::U0, false)]
    } else {
        [(Edge::U0, true), (Edge::V1, true), (Edge::U1, false), (Edge::V0, false)]
    }
}

fn bits(v: &Vec3) -> [u64; 3] {
    [v.x.to_bits(), v.y.to_bits(), v.z.to_bits()]
}

/// Vertex pool merging points closer than the stitch tolerance.
#[derive(Default)]
struct Vertices {
    grid: HashMap<[i64; 3], Vec<usize>>,
    points: Vec<Vec3>,
    ids: Vec<u64>,
}

impl Vertices {
    /// Vertex at `p`; a new one reuses the point entity `existing` if given.
    fn get(&mut self, em: &mut Emitter, p: Vec3, existing: Option<u64>) -> u64 {
        let cell = 1e-4;
        let q = [0, 1, 2].map(|a| (p[a] / cell).floor() as i64);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(list) = self.grid.get(&[q[0] + dx, q[1] + dy, q[2] + dz]) {
                        if let Some(&k) = list.iter().find(|&&k| (self.points[k] - p).norm() <= 10.0 * STITCH_TOL) {
                            return self.ids[k];
                        }
                    }
                }
            }
        }
        let pt = existing.unwrap_or_else(|| em.point(&p));
        let id = em.add("VERTEX_POINT", vec![Param::str(""), Param::Ref(pt)]);
        self.grid.entry(q).or_default().push(self.points.len());
        self.points.push(p);
        self.ids.push(id);
        id
    }
}

/// Emits the model: the geometry catalog once, one replica per placed
/// instance, shared edges and vertices, a closed shell for solids or an
/// open shell for sheets, then units and product context.
pub fn write_step(solid: &SolidModel, meta: &StepMeta) -> Result<(StepDocument, Vec<u8>)> {
    for inst in &solid.instances {
        if inst.geometry_ref >= solid.geometries.len() {
            return Err(Error::UnresolvedGeometry(inst.geometry_ref));
        }
    }
    let report = check_watertight(solid);
    if solid.closed && !report.watertight {
        return Err(Error::Topology(report.summary()));
    }
    let mut em = Emitter::default();

    // Geometry catalog.
    let mut surf_ids = Vec::with_capacity(solid.geometries.len());
    let mut curve_ids = Vec::with_capacity(solid.geometries.len());
    let mut cp_ids = Vec::with_capacity(solid.geometries.len());
    for g in &solid.geometries {
        let (sid, cps) = emit_surface(&mut em, &g.surface);
        surf_ids.push(sid);
        curve_ids.push(Edge::ALL.map(|e| emit_boundary_curve(&mut em, &g.surface, e, &cps)));
        cp_ids.push(cps);
    }

    // Instances.
    let mut dirs: HashMap<[u64; 3], u64> = HashMap::new();
    let mut origins: HashMap<[u64; 3], u64> = HashMap::new();
    let mut ops: HashMap<[u64; 4], u64> = HashMap::new();
    let mut face_geom = Vec::with_capacity(solid.instances.len());
    let mut operators: Vec<Option<u64>> = Vec::with_capacity(solid.instances.len());
    for inst in &solid.instances {
        let t = &inst.placement;
        if *t == RigidTransform::identity() {
            face_geom.push(surf_ids[inst.geometry_ref]);
            operators.push(None);
            continue;
        }
        let mut axes = [0u64; 3];
        for (a, slot) in axes.iter_mut().enumerate() {
            let d: Vec3 = t.rotation.column(a).into();
            *slot = *dirs.entry(bits(&d)).or_insert_with(|| em.direction(&d));
        }
        let o = *origins.entry(bits(&t.translation)).or_insert_with(|| em.point(&t.translation));
        let op = *ops.entry([axes[0], axes[1], axes[2], o]).or_insert_with(|| {
            em.add(
                "CARTESIAN_TRANSFORMATION_OPERATOR_3D",
                vec![
                    Param::str(""),
                    Param::str(""),
                    Param::Ref(axes[0]),
                    Param::Ref(axes[1]),
                    Param::Ref(o),
                    Param::Real(1.0),
                    Param::Ref(axes[2]),
                ],
            )
        });
        face_geom.push(em.add("SURFACE_REPLICA", vec![Param::str(""), Param::Ref(surf_ids[inst.geometry_ref]), Param::Ref(op)]));
        operators.push(Some(op));
    }

    // Edges: one per matched pair, one per open edge-use.
    // Edge ends are corner control points of the clamped nets.
    let corner = |u: EdgeUse, end: bool| -> (Vec3, usize) {
        let inst = &solid.instances[u.instance];
        let s = &solid.geometries[inst.geometry_ref].surface;
        let n = if u.edge.runs_along_u() { s.nu } else { s.nv };
        let (i, j) = u.edge.index(if end { n - 1 } else { 0 }, 0, s.nu, s.nv);
        (inst.placement.apply(&s.cp(i, j)), i * s.nv + j)
    };
    let mut groups: Vec<Vec<EdgeUse>> = report.matched.iter().map(|m| vec![m.0, m.1]).collect();
    let mut covered: HashSet<EdgeUse> = groups.iter().flatten().copied().collect();
    for k in 0..solid.instances.len() {
        for e in Edge::ALL {
            let u = EdgeUse { instance: k, edge: e };
            if covered.insert(u) {
                groups.push(vec![u]);
            }
        }
    }
    let mut vertices = Vertices::default();
    let mut edge_of: HashMap<EdgeUse, (u64, bool)> = HashMap::new();
    for group in &groups {
        let first = group[0];
        let inst = &solid.instances[first.instance];
        let ((p0, c0), (p1, c1)) = (corner(first, false), corner(first, true));
        let reuse = |c: usize| operators[first.instance].is_none().then(|| cp_ids[inst.geometry_ref][c]);
        let v0 = vertices.get(&mut em, p0, reuse(c0));
        let v1 = vertices.get(&mut em, p1, reuse(c1));
        let base = curve_ids[inst.geometry_ref][Edge::ALL.iter().position(|&e| e == first.edge).unwrap()];
        let curve = match operators[first.instance] {
            Some(op) => em.add("CURVE_REPLICA", vec![Param::str(""), Param::Ref(base), Param::Ref(op)]),
            None => base,
        };
        let ec = em.add("EDGE_CURVE", vec![Param::str(""), Param::Ref(v0), Param::Ref(v1), Param::Ref(curve), Param::bool(true)]);
        for &u in group {
            let s = corner(u, false).0;
            edge_of.insert(u, (ec, (s - p0).norm() > (s - p1).norm()));
        }
    }

    // Faces.
    let mut faces = Vec::with_capacity(solid.instances.len());
    for (k, inst) in solid.instances.iter().enumerate() {
        let oriented: Vec<u64> = loop_edges(inst.same_sense)
            .into_iter()
            .map(|(e, forward)| {
                let (ec, reversed) = edge_of[&EdgeUse { instance: k, edge: e }];
                em.add(
                    "ORIENTED_EDGE",
                    vec![Param::str(""), Param::Derived, Param::Derived, Param::Ref(ec), Param::bool(forward != reversed)],
                )
            })
            .collect();
        let lp = em.add("EDGE_LOOP", vec![Param::str(""), Param::refs(oriented)]);
        let bound = em.add("FACE_OUTER_BOUND", vec![Param::str(""), Param::Ref(lp), Param::bool(true)]);
        faces.push(em.add(
            "ADVANCED_FACE",
            vec![Param::str(""), Param::refs([bound]), Param::Ref(face_geom[k]), Param::bool(inst.same_sense)],
        ));
    }
    let name = Param::str(&meta.name);
    let body = if solid.closed {
        let shell = em.add("CLOSED_SHELL", vec![Param::str(""), Param::refs(faces)]);
        em.add("MANIFOLD_SOLID_BREP", vec![name.clone(), Param::Ref(shell)])
    } else {
        let shell = em.add("OPEN_SHELL", vec![Param::str(""), Param::refs(faces)]);
        em.add("SHELL_BASED_SURFACE_MODEL", vec![name.clone(), Param::refs([shell])])
    };

    // Units, tolerance and product context.
    let mm = em.add_complex(vec![
        Record::new("LENGTH_UNIT", vec![]),
        Record::new("NAMED_UNIT", vec![Param::Derived]),
        Record::new("SI_UNIT", vec![Param::Enum("MILLI".into()), Param::Enum("METRE".into())]),
    ]);
    let rad = em.add_complex(vec![
        Record::new("NAMED_UNIT", vec![Param::Derived]),
        Record::new("PLANE_ANGLE_UNIT", vec![]),
        Record::new("SI_UNIT", vec![Param::Unset, Param::Enum("RADIAN".into())]),
    ]);
    let sr = em.add_complex(vec![
        Record::new("NAMED_UNIT", vec![Param::Derived]),
        Record::new("SI_UNIT", vec![Param::Unset, Param::Enum("STERADIAN".into())]),
        Record::new("SOLID_ANGLE_UNIT", vec![]),
    ]);
    let unc = em.add(
        "UNCERTAINTY_MEASURE_WITH_UNIT",
        vec![
            Param::Typed("LENGTH_MEASURE".into(), Box::new(Param::Real(meta.tolerance))),
            Param::Ref(mm),
            Param::str("distance_accuracy_value"),
            Param::str("maximum model deviation"),
        ],
    );
    let ctx = em.add_complex(vec![
        Record::new("GEOMETRIC_REPRESENTATION_CONTEXT", vec![Param::Int(3)]),
        Record::new("GLOBAL_UNCERTAINTY_ASSIGNED_CONTEXT", vec![Param::refs([unc])]),
        Record::new("GLOBAL_UNIT_ASSIGNED_CONTEXT", vec![Param::refs([mm, rad, sr])]),
        Record::new("REPRESENTATION_CONTEXT", vec![Param::str(""), Param::str("3D")]),
    ]);
    let rep_type = if solid.closed { "ADVANCED_BREP_SHAPE_REPRESENTATION" } else { "MANIFOLD_SURFACE_SHAPE_REPRESENTATION" };
    let rep = em.add(rep_type, vec![name.clone(), Param::refs([body]), Param::Ref(ctx)]);
    let app = em.add("APPLICATION_CONTEXT", vec![Param::str("automotive design")]);
    em.add(
        "APPLICATION_PROTOCOL_DEFINITION",
        vec![Param::str("international standard"), Param::str("automotive_design"), Param::Int(2000), Param::Ref(app)],
    );
    let pc = em.add("PRODUCT_CONTEXT", vec![Param::str(""), Param::Ref(app), Param::str("mechanical")]);
    let product = em.add("PRODUCT", vec![name.clone(), name.clone(), Param::str(""), Param::refs([pc])]);
    let pdf = em.add("PRODUCT_DEFINITION_FORMATION", vec![Param::str(""), Param::str(""), Param::Ref(product)]);
    let pdc = em.add("PRODUCT_DEFINITION_CONTEXT", vec![Param::str("part definition"), Param::Ref(app), Param::str("design")]);
    let pd = em.add("PRODUCT_DEFINITION", vec![Param::str("design"), Param::str(""), Param::Ref(pdf), Param::Ref(pdc)]);
    let pds = em.add("PRODUCT_DEFINITION_SHAPE", vec![Param::str(""), Param::str(""), Param::Ref(pd)]);
    em.add("SHAPE_DEFINITION_REPRESENTATION", vec![Param::Ref(pds), Param::Ref(rep)]);

    let header = vec![
        Record::new("FILE_DESCRIPTION", vec![Param::List(vec![Param::str("TPMS solid model")]), Param::str("2;1")]),
        Record::new(
            "FILE_NAME",
            vec![
                name,
                Param::str(&meta.timestamp),
                Param::List(vec![Param::str(&meta.author)]),
                Param::List(vec![Param::str(&meta.organization)]),
                Param::str(concat!("tpms2step ", env!("CARGO_PKG_VERSION"))),
                Param::str("tpms2step"),
                Param::str(""),
            ],
        ),
        Record::new("FILE_SCHEMA", vec![Param::List(vec![Param::str(SCHEMA)])]),
    ];
    let doc = StepDocument { header, entities: em.entities };
    let bytes = doc.to_bytes();
    Ok((doc, bytes))
}
