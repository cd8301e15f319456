//! CPLEX-style LP text format.
//!
//! The writer emits a zero objective that mentions every variable once, so a
//! re-parse recovers the original variable order. Coefficients are printed
//! with Rust's shortest round-trip formatting and parse back bit-exact.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::IlpError;
use crate::model::{Comparator, IlpModel, LinConstraint, VarId, VarKind};

pub fn write_lp(model: &IlpModel) -> String {
    let mut out = String::new();
    out.push_str("\\ pure integer feasibility model\n");
    out.push_str("Minimize\n obj:");
    for (i, v) in model.vars.iter().enumerate() {
        if i % 8 == 0 && i > 0 {
            out.push_str("\n     ");
        }
        let _ = write!(out, " + 0 {}", v.name);
    }
    out.push_str("\nSubject To\n");
    for (ci, c) in model.constraints.iter().enumerate() {
        match &c.name {
            Some(name) => {
                let _ = write!(out, " {name}:");
            }
            None => {
                let _ = write!(out, " c{ci}:");
            }
        }
        if c.terms.is_empty() {
            // LP grammar needs at least one term.
            let _ = write!(out, " 0 {}", model.vars.first().map_or("x", |v| &v.name));
        }
        for (k, &(v, coef)) in c.terms.iter().enumerate() {
            let name = &model.vars[v.0].name;
            if k > 0 && k % 8 == 0 {
                out.push_str("\n   ");
            }
            if coef < 0.0 || (coef == 0.0 && coef.is_sign_negative()) {
                let _ = write!(out, " - {} {name}", -coef);
            } else {
                let _ = write!(out, " + {coef} {name}");
            }
        }
        let _ = writeln!(out, " {} {}", c.cmp.symbol(), c.rhs);
    }
    out.push_str("Bounds\n");
    for v in &model.vars {
        if v.kind == VarKind::Binary && v.lo == 0 && v.hi == 1 {
            continue;
        }
        if v.lo == v.hi {
            let _ = writeln!(out, " {} = {}", v.name, v.lo);
        } else {
            let _ = writeln!(out, " {} <= {} <= {}", v.lo, v.name, v.hi);
        }
    }
    let generals: Vec<&str> = model
        .vars
        .iter()
        .filter(|v| v.kind == VarKind::Integer)
        .map(|v| v.name.as_str())
        .collect();
    if !generals.is_empty() {
        out.push_str("General\n");
        for chunk in generals.chunks(8) {
            let _ = writeln!(out, " {}", chunk.join(" "));
        }
    }
    let binaries: Vec<&str> = model
        .vars
        .iter()
        .filter(|v| v.kind == VarKind::Binary)
        .map(|v| v.name.as_str())
        .collect();
    if !binaries.is_empty() {
        out.push_str("Binary\n");
        for chunk in binaries.chunks(8) {
            let _ = writeln!(out, " {}", chunk.join(" "));
        }
    }
    out.push_str("End\n");
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Section {
    Preamble,
    Objective,
    Constraints,
    Bounds,
    General,
    Binary,
    End,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Name(String),
    Plus,
    Minus,
    Cmp(Comparator),
    Colon,
}

fn tokenize(s: &str, line: usize) -> Result<Vec<Tok>, IlpError> {
    let mut toks = Vec::new();
    let chars: Vec<char> = s.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '+' {
            toks.push(Tok::Plus);
            i += 1;
        } else if c == '-' {
            toks.push(Tok::Minus);
            i += 1;
        } else if c == ':' {
            toks.push(Tok::Colon);
            i += 1;
        } else if c == '<' || c == '>' || c == '=' {
            let mut j = i + 1;
            while j < chars.len() && matches!(chars[j], '<' | '>' | '=') {
                j += 1;
            }
            let op: String = chars[i..j].iter().collect();
            let cmp = match op.as_str() {
                "<" | "<=" | "=<" => Comparator::Le,
                ">" | ">=" | "=>" => Comparator::Ge,
                "=" => Comparator::Eq,
                _ => {
                    return Err(IlpError::Parse {
                        line,
                        msg: format!("bad comparator {op:?}"),
                    })
                }
            };
            toks.push(Tok::Cmp(cmp));
            i = j;
        } else if c.is_ascii_digit() || c == '.' {
            let mut j = i;
            while j < chars.len()
                && (chars[j].is_ascii_digit()
                    || chars[j] == '.'
                    || ((chars[j] == 'e' || chars[j] == 'E')
                        && j + 1 < chars.len()
                        && (chars[j + 1].is_ascii_digit() || chars[j + 1] == '-' || chars[j + 1] == '+'))
                    || ((chars[j] == '-' || chars[j] == '+') && j > i && matches!(chars[j - 1], 'e' | 'E')))
            {
                j += 1;
            }
            let text: String = chars[i..j].iter().collect();
            let v = text.parse::<f64>().map_err(|e| IlpError::Parse {
                line,
                msg: format!("bad number {text:?}: {e}"),
            })?;
            toks.push(Tok::Num(v));
            i = j;
        } else {
            let mut j = i;
            while j < chars.len()
                && !chars[j].is_whitespace()
                && !matches!(chars[j], '+' | '-' | ':' | '<' | '>' | '=')
            {
                j += 1;
            }
            let text: String = chars[i..j].iter().collect();
            let lower = text.to_ascii_lowercase();
            if lower == "inf" || lower == "infinity" {
                toks.push(Tok::Num(f64::INFINITY));
            } else {
                toks.push(Tok::Name(text));
            }
            i = j;
        }
    }
    Ok(toks)
}

fn section_header(line: &str) -> Option<Section> {
    let l = line.trim().to_ascii_lowercase();
    Some(match l.as_str() {
        "minimize" | "minimise" | "min" | "maximize" | "maximise" | "max" => Section::Objective,
        "subject to" | "such that" | "st" | "s.t." | "st." => Section::Constraints,
        "bounds" | "bound" => Section::Bounds,
        "general" | "generals" | "gen" | "integer" | "integers" => Section::General,
        "binary" | "binaries" | "bin" => Section::Binary,
        "end" => Section::End,
        _ => return None,
    })
}

struct Builder {
    model: IlpModel,
    index: HashMap<String, VarId>,
    lo: Vec<Option<f64>>,
    hi: Vec<Option<f64>>,
}

impl Builder {
    fn var(&mut self, name: &str) -> VarId {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        // Placeholder bounds; LP defaults are [0, +inf) until Bounds says otherwise.
        let id = self.model.add_integer(name, 0, 0);
        self.index.insert(name.to_string(), id);
        self.lo.push(None);
        self.hi.push(None);
        id
    }
}

/// Parses a linear expression `[+|-] [num] name ...` into terms, stopping at
/// the first comparator. Returns the terms and the index of the comparator.
fn parse_expr(
    b: &mut Builder,
    toks: &[Tok],
    line: usize,
) -> Result<(Vec<(VarId, f64)>, usize), IlpError> {
    let mut terms = Vec::new();
    let mut i = 0;
    let mut sign = 1.0;
    let mut coef: Option<f64> = None;
    while i < toks.len() {
        match &toks[i] {
            Tok::Plus => {}
            Tok::Minus => sign = -sign,
            Tok::Num(v) => coef = Some(coef.unwrap_or(1.0) * v),
            Tok::Name(n) => {
                let id = b.var(n);
                terms.push((id, sign * coef.unwrap_or(1.0)));
                sign = 1.0;
                coef = None;
            }
            Tok::Cmp(_) => return Ok((terms, i)),
            Tok::Colon => {
                return Err(IlpError::Parse {
                    line,
                    msg: "unexpected ':'".into(),
                })
            }
        }
        i += 1;
    }
    if coef.is_some() {
        return Err(IlpError::Parse {
            line,
            msg: "constant term without a variable".into(),
        });
    }
    Ok((terms, i))
}

fn signed_number(toks: &[Tok], line: usize) -> Result<f64, IlpError> {
    let mut sign = 1.0;
    for t in toks {
        match t {
            Tok::Plus => {}
            Tok::Minus => sign = -sign,
            Tok::Num(v) => return Ok(sign * v),
            _ => break,
        }
    }
    Err(IlpError::Parse {
        line,
        msg: "expected a number".into(),
    })
}

fn integral(v: f64, line: usize) -> Result<i64, IlpError> {
    if !v.is_finite() || v.fract() != 0.0 {
        return Err(IlpError::Parse {
            line,
            msg: format!("integer variable bound {v} must be a finite integer"),
        });
    }
    Ok(v as i64)
}

/// Parses the LP subset written by [`write_lp`] (plus the common spelling
/// variants). Every variable must end up integer or binary with finite bounds.
pub fn parse_lp(text: &str) -> Result<IlpModel, IlpError> {
    let mut b = Builder {
        model: IlpModel::new(),
        index: HashMap::new(),
        lo: Vec::new(),
        hi: Vec::new(),
    };
    let mut section = Section::Preamble;
    let mut kinds: HashMap<VarId, VarKind> = HashMap::new();
    // Constraints and objectives may span lines; collect a statement until the
    // next name label / comparator-terminated expression.
    let mut pending: Vec<Tok> = Vec::new();
    let mut pending_line = 0;

    let flush_constraint =
        |b: &mut Builder, toks: &mut Vec<Tok>, line: usize| -> Result<(), IlpError> {
            if toks.is_empty() {
                return Ok(());
            }
            let (name, body) = match (toks.first(), toks.get(1)) {
                (Some(Tok::Name(n)), Some(Tok::Colon)) => (Some(n.clone()), &toks[2..]),
                _ => (None, &toks[..]),
            };
            let (terms, at) = parse_expr(b, body, line)?;
            let Some(Tok::Cmp(cmp)) = body.get(at) else {
                return Err(IlpError::Parse {
                    line,
                    msg: "constraint without comparator".into(),
                });
            };
            let rhs = signed_number(&body[at + 1..], line)?;
            let mut c = LinConstraint::new(terms, *cmp, rhs);
            c.name = name;
            b.model.add_constraint(c);
            toks.clear();
            Ok(())
        };

    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let line = raw.split('\\').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(sec) = section_header(line) {
            if section == Section::Constraints {
                flush_constraint(&mut b, &mut pending, pending_line)?;
            } else if section == Section::Objective {
                let body = match (pending.first(), pending.get(1)) {
                    (Some(Tok::Name(_)), Some(Tok::Colon)) => pending[2..].to_vec(),
                    _ => pending.clone(),
                };
                parse_expr(&mut b, &body, pending_line)?;
                pending.clear();
            }
            section = sec;
            continue;
        }
        let toks = tokenize(line, line_no)?;
        match section {
            Section::Preamble => {
                return Err(IlpError::Parse {
                    line: line_no,
                    msg: "content before the objective section".into(),
                })
            }
            Section::End => break,
            Section::Objective => {
                if pending.is_empty() {
                    pending_line = line_no;
                }
                pending.extend(toks);
            }
            Section::Constraints => {
                let starts_new = matches!((toks.first(), toks.get(1)), (Some(Tok::Name(_)), Some(Tok::Colon)));
                let pending_complete = pending.iter().any(|t| matches!(t, Tok::Cmp(_)))
                    && matches!(pending.last(), Some(Tok::Num(_)));
                if starts_new || pending_complete {
                    flush_constraint(&mut b, &mut pending, pending_line)?;
                }
                if pending.is_empty() {
                    pending_line = line_no;
                }
                pending.extend(toks);
            }
            Section::Bounds => parse_bound(&mut b, &toks, line_no)?,
            Section::General | Section::Binary => {
                for t in toks {
                    let Tok::Name(n) = t else {
                        return Err(IlpError::Parse {
                            line: line_no,
                            msg: "expected variable names".into(),
                        });
                    };
                    let id = b.var(&n);
                    let kind = if section == Section::Binary {
                        VarKind::Binary
                    } else {
                        VarKind::Integer
                    };
                    kinds.insert(id, kind);
                }
            }
        }
    }
    if section == Section::Constraints {
        flush_constraint(&mut b, &mut pending, pending_line)?;
    }

    for i in 0..b.model.vars.len() {
        let id = VarId(i);
        let name = b.model.vars[i].name.clone();
        let Some(&kind) = kinds.get(&id) else {
            return Err(IlpError::Parse {
                line: 0,
                msg: format!("variable {name} is continuous; only integer models are supported"),
            });
        };
        let (lo, hi) = match kind {
            VarKind::Binary => (
                b.lo[i].unwrap_or(0.0).max(0.0),
                b.hi[i].unwrap_or(1.0).min(1.0),
            ),
            VarKind::Integer => (b.lo[i].unwrap_or(0.0), b.hi[i].unwrap_or(f64::INFINITY)),
        };
        let v = &mut b.model.vars[i];
        v.kind = kind;
        v.lo = integral(lo, 0).map_err(|_| IlpError::Parse {
            line: 0,
            msg: format!("variable {name} needs a finite integral lower bound"),
        })?;
        v.hi = integral(hi, 0).map_err(|_| IlpError::Parse {
            line: 0,
            msg: format!("variable {name} needs a finite integral upper bound"),
        })?;
    }
    b.model.validate()?;
    Ok(b.model)
}

fn parse_bound(b: &mut Builder, toks: &[Tok], line: usize) -> Result<(), IlpError> {
    let err = |msg: &str| IlpError::Parse {
        line,
        msg: msg.to_string(),
    };
    // Forms: `lo <= x <= hi`, `x <= hi`, `x >= lo`, `x = v`, `lo <= x`, `x free`.
    let name_pos = toks
        .iter()
        .position(|t| matches!(t, Tok::Name(_)))
        .ok_or_else(|| err("bound without a variable"))?;
    let Tok::Name(name) = &toks[name_pos] else {
        unreachable!()
    };
    if name.eq_ignore_ascii_case("free") {
        return Err(err("bound without a variable"));
    }
    let id = b.var(name);
    let after = &toks[name_pos + 1..];
    if let Some(Tok::Name(kw)) = after.first() {
        if kw.eq_ignore_ascii_case("free") {
            b.lo[id.0] = Some(f64::NEG_INFINITY);
            b.hi[id.0] = Some(f64::INFINITY);
            return Ok(());
        }
    }
    if name_pos > 0 {
        let before = &toks[..name_pos];
        let Some(Tok::Cmp(cmp)) = before.last() else {
            return Err(err("expected comparator before variable"));
        };
        let v = signed_number(&before[..before.len() - 1], line)?;
        match cmp {
            Comparator::Le => b.lo[id.0] = Some(v),
            Comparator::Ge => b.hi[id.0] = Some(v),
            Comparator::Eq => {
                b.lo[id.0] = Some(v);
                b.hi[id.0] = Some(v);
            }
        }
    }
    if let Some(Tok::Cmp(cmp)) = after.first() {
        let v = signed_number(&after[1..], line)?;
        match cmp {
            Comparator::Le => b.hi[id.0] = Some(v),
            Comparator::Ge => b.lo[id.0] = Some(v),
            Comparator::Eq => {
                b.lo[id.0] = Some(v);
                b.hi[id.0] = Some(v);
            }
        }
    } else if name_pos == 0 {
        return Err(err("bound without comparator"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> IlpModel {
        let mut m = IlpModel::new();
        let x = m.add_integer("L0.n1.yhat1", -5, 12);
        let y = m.add_integer("x0", 3, 3);
        let b = m.add_binary("L1.n0.bx");
        m.add_constraint(LinConstraint::le(vec![(x, 0.1), (y, -2.5e-7), (b, 40.0)], 0.5).named("r0"));
        m.add_constraint(LinConstraint::ge(vec![(x, -1.0), (b, 1.0)], -3.0));
        m.add_constraint(LinConstraint::eq(vec![(b, 1.0)], 1.0));
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = sample();
        let text = write_lp(&m);
        let back = parse_lp(&text).unwrap();
        assert_eq!(back.vars, m.vars);
        assert_eq!(back.constraints.len(), m.constraints.len());
        for (a, b) in back.constraints.iter().zip(&m.constraints) {
            assert_eq!(a.terms, b.terms);
            assert_eq!(a.cmp, b.cmp);
            assert_eq!(a.rhs.to_bits(), b.rhs.to_bits());
        }
    }

    #[test]
    fn accepts_hand_written_file() {
        let text = "\\ comment\nMaximize\n obj: x\nSubject To\n c1: 2 x + 3 y\n   <= 12\n c2: x - y >= -2\nBounds\n 0 <= x <= 4\n y <= 5\nGenerals\n x y\nEnd\n";
        let m = parse_lp(text).unwrap();
        assert_eq!(m.vars.len(), 2);
        assert_eq!(m.constraints.len(), 2);
        assert_eq!(m.constraints[0].terms, vec![(VarId(0), 2.0), (VarId(1), 3.0)]);
        assert_eq!(m.constraints[1].rhs, -2.0);
        assert_eq!((m.vars[1].lo, m.vars[1].hi), (0, 5));
    }

    #[test]
    fn rejects_continuous_and_unbounded() {
        let cont = "Minimize\n obj: x\nSubject To\n c: x >= 1\nBounds\n x <= 3\nEnd\n";
        assert!(parse_lp(cont).is_err());
        let unb = "Minimize\n obj: x\nSubject To\n c: x >= 1\nGeneral\n x\nEnd\n";
        assert!(parse_lp(unb).is_err());
    }
}
