//! Text form of attack programs.
//!
//! ```text
//! program   := attack (';' attack)*
//! attack    := decorated 'with' loss
//! decorated := 'randomize' decorated
//!            | 'EOT' decorated ',' INT
//!            | 'repeat' decorated ',' INT
//!            | 'try' decorated 'for' NUMBER
//!            | '(' decorated ')'
//!            | BACKBONE 'with' '{' (NAME ':' NUMBER),* '}'
//! loss      := 'untargeted' KIND 'with' TAP
//!            | 'targeted' KIND ',' INT ('-' 'untargeted' KIND)? 'with' TAP
//! TAP       := 'logits' | 'probs'
//! ```
//!
//! Decorators bind tighter than `;`. A `#` starts a comment running to
//! the end of the line. Example:
//!
//! ```text
//! repeat (EOT (randomize APGD with {n_iter: 100, rho: 0.75}), 8), 3
//!     with untargeted DLR with logits;
//! SQR with {n_queries: 2000} with targeted Hinge, 3 with probs
//! ```

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attack::{AttackSpec, Backbone, ParamKind};
use crate::error::{Error, Result};
use crate::graph::Tap;
use crate::loss::{Direction, LossKind, LossSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackProgram {
    pub attacks: Vec<AttackSpec>,
}

impl AttackProgram {
    pub fn parse(text: &str) -> Result<Self> {
        parse(text)
    }
}

impl fmt::Display for AttackProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format(self))
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Word(String),
    Num(f64),
    Sym(char),
    End,
}

#[derive(Clone, Debug)]
struct Token {
    tok: Tok,
    line: usize,
    column: usize,
}

fn tokenize(text: &str) -> Result<Vec<Token>> {
    let mut out = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let (mut i, mut line, mut col) = (0, 1, 1);
    while i < chars.len() {
        let c = chars[i];
        let (tl, tc) = (line, col);
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c == '#' {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        let tok = if c.is_ascii_alphabetic() || c == '_' {
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            Tok::Word(chars[start..i].iter().collect())
        } else if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let s: String = chars[start..i].iter().collect();
            Tok::Num(s.parse().map_err(|_| Error::Parse {
                line: tl,
                column: tc,
                message: format!("malformed number '{s}'"),
            })?)
        } else if "{}(),:;-".contains(c) {
            i += 1;
            Tok::Sym(c)
        } else {
            return Err(Error::Parse {
                line: tl,
                column: tc,
                message: format!("unexpected character '{c}'"),
            });
        };
        col += i - start;
        out.push(Token {
            tok,
            line: tl,
            column: tc,
        });
    }
    out.push(Token {
        tok: Tok::End,
        line,
        column: col,
    });
    Ok(out)
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Word(w) => format!("'{w}'"),
        Tok::Num(n) => format!("number {n}"),
        Tok::Sym(c) => format!("'{c}'"),
        Tok::End => "end of input".into(),
    }
}

#[derive(Default)]
struct Decorators {
    randomize: Option<bool>,
    eot: Option<u32>,
    repeat: Option<u32>,
    budget: Option<f64>,
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn next(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error_at<T>(&self, t: &Token, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            line: t.line,
            column: t.column,
            message: message.into(),
        })
    }

    fn expect_sym(&mut self, c: char) -> Result<()> {
        let t = self.next();
        if t.tok == Tok::Sym(c) {
            Ok(())
        } else {
            self.error_at(&t, format!("expected '{c}', found {}", describe(&t.tok)))
        }
    }

    fn expect_word(&mut self, w: &str) -> Result<()> {
        let t = self.next();
        match &t.tok {
            Tok::Word(x) if x == w => Ok(()),
            other => self.error_at(&t, format!("expected '{w}', found {}", describe(other))),
        }
    }

    fn number(&mut self) -> Result<(f64, Token)> {
        let t = self.next();
        match t.tok {
            Tok::Num(n) => Ok((n, t)),
            Tok::Sym('-') => {
                let (n, _) = self.number()?;
                Ok((-n, t))
            }
            ref other => self.error_at(&t, format!("expected a number, found {}", describe(other))),
        }
    }

    fn count(&mut self) -> Result<u32> {
        let (n, t) = self.number()?;
        if n.fract() != 0.0 || n < 1.0 || n > u32::MAX as f64 {
            return self.error_at(&t, format!("expected a positive integer, found {n}"));
        }
        Ok(n as u32)
    }

    fn program(&mut self) -> Result<AttackProgram> {
        let mut attacks = vec![self.attack()?];
        while self.peek().tok == Tok::Sym(';') {
            self.next();
            attacks.push(self.attack()?);
        }
        let t = self.peek().clone();
        if t.tok != Tok::End {
            return self.error_at(&t, format!("expected ';' or end of input, found {}", describe(&t.tok)));
        }
        Ok(AttackProgram { attacks })
    }

    fn attack(&mut self) -> Result<AttackSpec> {
        let start = self.peek().clone();
        let mut deco = Decorators::default();
        let (backbone, params) = self.decorated(&mut deco)?;
        self.expect_word("with")?;
        let loss = self.loss()?;
        let spec = AttackSpec {
            backbone,
            params,
            randomize: deco.randomize.unwrap_or(false),
            eot: deco.eot.unwrap_or(1),
            repeat: deco.repeat.unwrap_or(1),
            budget_seconds: deco.budget,
            loss,
        };
        let violations = spec.validate_ranges();
        if !violations.is_empty() {
            return Err(Error::Range(format!(
                "line {}, column {}: {}",
                start.line,
                start.column,
                violations.join("; ")
            )));
        }
        Ok(spec)
    }

    fn decorated(&mut self, deco: &mut Decorators) -> Result<(Backbone, BTreeMap<String, f64>)> {
        let t = self.next();
        let dup = |p: &Parser, name: &str| p.error_at::<()>(&t, format!("duplicate {name} decorator"));
        match &t.tok {
            Tok::Word(w) if w == "randomize" => {
                if deco.randomize.is_some() {
                    dup(self, "randomize")?;
                }
                deco.randomize = Some(true);
                self.decorated(deco)
            }
            Tok::Word(w) if w == "EOT" || w == "repeat" => {
                let is_eot = w == "EOT";
                if (is_eot && deco.eot.is_some()) || (!is_eot && deco.repeat.is_some()) {
                    dup(self, if is_eot { "EOT" } else { "repeat" })?;
                }
                // Reserve the slot so nested duplicates are caught.
                if is_eot {
                    deco.eot = Some(1);
                } else {
                    deco.repeat = Some(1);
                }
                let inner = self.decorated(deco)?;
                self.expect_sym(',')?;
                let n = self.count()?;
                if is_eot {
                    deco.eot = Some(n);
                } else {
                    deco.repeat = Some(n);
                }
                Ok(inner)
            }
            Tok::Word(w) if w == "try" => {
                if deco.budget.is_some() {
                    dup(self, "try")?;
                }
                deco.budget = Some(f64::NAN);
                let inner = self.decorated(deco)?;
                self.expect_word("for")?;
                let (n, nt) = self.number()?;
                if !(n.is_finite() && n > 0.0) {
                    return self.error_at(&nt, format!("try budget must be positive, found {n}"));
                }
                deco.budget = Some(n);
                Ok(inner)
            }
            Tok::Sym('(') => {
                let inner = self.decorated(deco)?;
                self.expect_sym(')')?;
                Ok(inner)
            }
            Tok::Word(w) => match Backbone::from_name(w) {
                Some(b) => {
                    self.expect_word("with")?;
                    let params = self.params(b)?;
                    Ok((b, params))
                }
                None => self.error_at(&t, format!("unknown attack '{w}'")),
            },
            other => self.error_at(&t, format!("expected an attack, found {}", describe(other))),
        }
    }

    fn params(&mut self, b: Backbone) -> Result<BTreeMap<String, f64>> {
        self.expect_sym('{')?;
        let mut given = BTreeMap::new();
        while self.peek().tok != Tok::Sym('}') {
            let t = self.next();
            let Tok::Word(name) = &t.tok else {
                return self.error_at(&t, format!("expected a parameter name, found {}", describe(&t.tok)));
            };
            if b.param(name).is_none() {
                return self.error_at(&t, format!("{b} has no parameter '{name}'"));
            }
            if given.contains_key(name) {
                return self.error_at(&t, format!("parameter '{name}' given twice"));
            }
            self.expect_sym(':')?;
            let (v, _) = self.number()?;
            given.insert(name.clone(), v);
            if self.peek().tok == Tok::Sym(',') {
                self.next();
            } else if self.peek().tok != Tok::Sym('}') {
                let t = self.peek().clone();
                return self.error_at(&t, format!("expected ',' or '}}', found {}", describe(&t.tok)));
            }
        }
        self.next();
        let mut params: BTreeMap<String, f64> = b
            .params()
            .iter()
            .map(|p| (p.name.to_string(), p.default_value()))
            .collect();
        params.extend(given);
        Ok(params)
    }

    fn kind(&mut self) -> Result<LossKind> {
        let t = self.next();
        match &t.tok {
            Tok::Word(w) => match LossKind::from_name(w) {
                Some(k) => Ok(k),
                None => self.error_at(&t, format!("unknown loss '{w}'")),
            },
            other => self.error_at(&t, format!("expected a loss name, found {}", describe(other))),
        }
    }

    fn loss(&mut self) -> Result<LossSpec> {
        let t = self.next();
        let (kind, direction, ntargets) = match &t.tok {
            Tok::Word(w) if w == "untargeted" => (self.kind()?, Direction::U, 1),
            Tok::Word(w) if w == "targeted" => {
                let kind = self.kind()?;
                self.expect_sym(',')?;
                let n = self.count()? as usize;
                if self.peek().tok == Tok::Sym('-') {
                    self.next();
                    self.expect_word("untargeted")?;
                    let kt = self.peek().clone();
                    if self.kind()? != kind {
                        return self.error_at(&kt, "both sides of a difference loss must use the same loss");
                    }
                    (kind, Direction::D, n)
                } else {
                    (kind, Direction::T, n)
                }
            }
            other => {
                return self.error_at(&t, format!("expected 'targeted' or 'untargeted', found {}", describe(other)))
            }
        };
        self.expect_word("with")?;
        let t = self.next();
        let tap = match &t.tok {
            Tok::Word(w) if w == "logits" => Tap::Logits,
            Tok::Word(w) if w == "probs" => Tap::Probs,
            other => return self.error_at(&t, format!("expected 'logits' or 'probs', found {}", describe(other))),
        };
        Ok(LossSpec {
            kind,
            direction,
            tap,
            ntargets,
            kappa: None,
        })
    }
}

/// Parses a program and validates every attack against the parameter
/// tables. Omitted parameters take their table defaults.
pub fn parse(text: &str) -> Result<AttackProgram> {
    let mut p = Parser {
        toks: tokenize(text)?,
        pos: 0,
    };
    p.program()
}

fn format_value(b: Backbone, name: &str, v: f64) -> String {
    match b.param(name).map(|p| p.kind) {
        Some(ParamKind::Int) if v.fract() == 0.0 && v.abs() < 1e15 => format!("{}", v as i64),
        _ => format!("{v}"),
    }
}

/// Canonical text of one attack; decorators nest as
/// `try (repeat (EOT (randomize X), n), n) for s`.
pub fn format_attack(spec: &AttackSpec) -> String {
    let params: Vec<String> = spec
        .params
        .iter()
        .map(|(k, v)| format!("{k}: {}", format_value(spec.backbone, k, *v)))
        .collect();
    let mut s = format!("{} with {{{}}}", spec.backbone, params.join(", "));
    if spec.randomize {
        s = format!("randomize {s}");
    }
    if spec.eot != 1 {
        s = format!("EOT ({s}), {}", spec.eot);
    }
    if spec.repeat != 1 {
        s = format!("repeat ({s}), {}", spec.repeat);
    }
    if let Some(b) = spec.budget_seconds {
        s = format!("try ({s}) for {b}");
    }
    format!("{s} with {}", spec.loss)
}

pub fn format(program: &AttackProgram) -> String {
    program
        .attacks
        .iter()
        .map(format_attack)
        .collect::<Vec<_>>()
        .join(";\n")
}
