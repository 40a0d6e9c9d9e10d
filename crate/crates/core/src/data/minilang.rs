//! Two toy imperative languages with identical semantics and different
//! surface syntax.
//!
//! ```text
//! alpha:  x = in + 3 ;   loop 2 { y = x * 2 ; }   print y ;
//! beta:   set x to in plus 3 .   loop 2 do set y to x times 2 . end   show y .
//! ```
//!
//! Programs read a single integer input `in`, assign variables, run counted
//! loops and print. Reading a variable that was never assigned is a
//! use-before-assign defect.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const VARIABLES: [&str; 7] = ["a", "b", "c", "d", "x", "y", "z"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Alpha,
    Beta,
}

impl Language {
    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "alpha" => Ok(Language::Alpha),
            "beta" => Ok(Language::Beta),
            other => Err(Error::Config(format!("unknown mini-language {other:?} (expected alpha or beta)"))),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Language::Alpha => "alpha",
            Language::Beta => "beta",
        }
    }

    pub fn other(&self) -> Self {
        match self {
            Language::Alpha => Language::Beta,
            Language::Beta => Language::Alpha,
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operand {
    Var(usize),
    Lit(i64),
    Input,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expr {
    Atom(Operand),
    Binary(Operand, BinOp, Operand),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stmt {
    Assign(usize, Expr),
    Loop(u32, Vec<Stmt>),
    Print(Operand),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program(pub Vec<Stmt>);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunError {
    UseBeforeAssign(String),
}

fn operand_text(o: Operand) -> String {
    match o {
        Operand::Var(v) => VARIABLES[v].to_string(),
        Operand::Lit(n) => n.to_string(),
        Operand::Input => "in".to_string(),
    }
}

fn op_symbol(op: BinOp, lang: Language) -> &'static str {
    match (lang, op) {
        (Language::Alpha, BinOp::Add) => "+",
        (Language::Alpha, BinOp::Sub) => "-",
        (Language::Alpha, BinOp::Mul) => "*",
        (Language::Beta, BinOp::Add) => "plus",
        (Language::Beta, BinOp::Sub) => "minus",
        (Language::Beta, BinOp::Mul) => "times",
    }
}

fn expr_tokens(e: Expr, lang: Language, out: &mut Vec<String>) {
    match e {
        Expr::Atom(o) => out.push(operand_text(o)),
        Expr::Binary(a, op, b) => {
            out.push(operand_text(a));
            out.push(op_symbol(op, lang).to_string());
            out.push(operand_text(b));
        }
    }
}

fn stmt_tokens(s: &Stmt, lang: Language, out: &mut Vec<String>) {
    let push = |out: &mut Vec<String>, t: &str| out.push(t.to_string());
    match (s, lang) {
        (Stmt::Assign(v, e), Language::Alpha) => {
            push(out, VARIABLES[*v]);
            push(out, "=");
            expr_tokens(*e, lang, out);
            push(out, ";");
        }
        (Stmt::Assign(v, e), Language::Beta) => {
            push(out, "set");
            push(out, VARIABLES[*v]);
            push(out, "to");
            expr_tokens(*e, lang, out);
            push(out, ".");
        }
        (Stmt::Loop(n, body), _) => {
            push(out, "loop");
            out.push(n.to_string());
            push(out, if lang == Language::Alpha { "{" } else { "do" });
            for b in body {
                stmt_tokens(b, lang, out);
            }
            push(out, if lang == Language::Alpha { "}" } else { "end" });
        }
        (Stmt::Print(o), Language::Alpha) => {
            push(out, "print");
            out.push(operand_text(*o));
            push(out, ";");
        }
        (Stmt::Print(o), Language::Beta) => {
            push(out, "show");
            out.push(operand_text(*o));
            push(out, ".");
        }
    }
}

impl Program {
    pub fn render(&self, lang: Language) -> String {
        let mut out = Vec::new();
        for s in &self.0 {
            stmt_tokens(s, lang, &mut out);
        }
        out.join(" ")
    }

    /// Templated natural-language description; identical for both
    /// languages.
    pub fn summarize(&self) -> String {
        fn describe(o: Operand) -> String {
            match o {
                Operand::Input => "input".into(),
                other => operand_text(other),
            }
        }
        fn clause(s: &Stmt) -> String {
            match s {
                Stmt::Assign(v, Expr::Atom(o)) => format!("copy {} into {}", describe(*o), VARIABLES[*v]),
                Stmt::Assign(v, Expr::Binary(a, op, b)) => {
                    let word = match op {
                        BinOp::Add => "sum",
                        BinOp::Sub => "difference",
                        BinOp::Mul => "product",
                    };
                    format!("{word} of {} and {} into {}", describe(*a), describe(*b), VARIABLES[*v])
                }
                Stmt::Loop(n, body) => {
                    let inner: Vec<String> = body.iter().map(clause).collect();
                    format!("repeat {n} times : {} done", inner.join(" and "))
                }
                Stmt::Print(o) => format!("output {}", describe(*o)),
            }
        }
        self.0.iter().map(clause).collect::<Vec<_>>().join(" then ")
    }

    /// Executes the program on `input`, returning printed values.
    pub fn run(&self, input: i64) -> std::result::Result<Vec<i64>, RunError> {
        fn read(env: &[Option<i64>], o: Operand, input: i64) -> std::result::Result<i64, RunError> {
            match o {
                Operand::Lit(n) => Ok(n),
                Operand::Input => Ok(input),
                Operand::Var(v) => env[v].ok_or_else(|| RunError::UseBeforeAssign(VARIABLES[v].to_string())),
            }
        }
        fn exec(stmts: &[Stmt], env: &mut Vec<Option<i64>>, input: i64, out: &mut Vec<i64>) -> std::result::Result<(), RunError> {
            for s in stmts {
                match s {
                    Stmt::Assign(v, Expr::Atom(o)) => env[*v] = Some(read(env, *o, input)?),
                    Stmt::Assign(v, Expr::Binary(a, op, b)) => {
                        let (x, y) = (read(env, *a, input)?, read(env, *b, input)?);
                        env[*v] = Some(match op {
                            BinOp::Add => x.wrapping_add(y),
                            BinOp::Sub => x.wrapping_sub(y),
                            BinOp::Mul => x.wrapping_mul(y),
                        });
                    }
                    Stmt::Loop(n, body) => {
                        for _ in 0..*n {
                            exec(body, env, input, out)?;
                        }
                    }
                    Stmt::Print(o) => out.push(read(env, *o, input)?),
                }
            }
            Ok(())
        }
        let mut env = vec![None; VARIABLES.len()];
        let mut out = Vec::new();
        exec(&self.0, &mut env, input, &mut out)?;
        Ok(out)
    }

    fn assigned_vars(&self) -> BTreeSet<usize> {
        fn walk(stmts: &[Stmt], acc: &mut BTreeSet<usize>) {
            for s in stmts {
                match s {
                    Stmt::Assign(v, _) => {
                        acc.insert(*v);
                    }
                    Stmt::Loop(_, body) => walk(body, acc),
                    Stmt::Print(_) => {}
                }
            }
        }
        let mut acc = BTreeSet::new();
        walk(&self.0, &mut acc);
        acc
    }

    /// Every operand position that reads a value, in textual order.
    fn read_sites(&mut self) -> Vec<&mut Operand> {
        fn walk<'a>(stmts: &'a mut [Stmt], acc: &mut Vec<&'a mut Operand>) {
            for s in stmts {
                match s {
                    Stmt::Assign(_, Expr::Atom(o)) | Stmt::Print(o) => acc.push(o),
                    Stmt::Assign(_, Expr::Binary(a, _, b)) => {
                        acc.push(a);
                        acc.push(b);
                    }
                    Stmt::Loop(_, body) => walk(body, acc),
                }
            }
        }
        let mut acc = Vec::new();
        walk(&mut self.0, &mut acc);
        acc
    }
}

// ---------------------------------------------------------------- parsing

struct Tokens<'a> {
    toks: Vec<&'a str>,
    pos: usize,
    lang: Language,
}

impl<'a> Tokens<'a> {
    fn next(&mut self) -> Result<&'a str> {
        let t = self
            .toks
            .get(self.pos)
            .copied()
            .ok_or_else(|| Error::Input(format!("{}: unexpected end of program", self.lang)))?;
        self.pos += 1;
        Ok(t)
    }

    fn peek(&self) -> Option<&'a str> {
        self.toks.get(self.pos).copied()
    }

    fn expect(&mut self, want: &str) -> Result<()> {
        let got = self.next()?;
        if got != want {
            return Err(Error::Input(format!("{}: expected {want:?} at token {}, found {got:?}", self.lang, self.pos - 1)));
        }
        Ok(())
    }

    fn var(&mut self) -> Result<usize> {
        let t = self.next()?;
        VARIABLES
            .iter()
            .position(|&v| v == t)
            .ok_or_else(|| Error::Input(format!("{}: {t:?} is not a variable", self.lang)))
    }

    fn operand(&mut self) -> Result<Operand> {
        let t = self.next()?;
        if t == "in" {
            return Ok(Operand::Input);
        }
        if let Some(v) = VARIABLES.iter().position(|&v| v == t) {
            return Ok(Operand::Var(v));
        }
        t.parse::<i64>()
            .map(Operand::Lit)
            .map_err(|_| Error::Input(format!("{}: bad operand {t:?}", self.lang)))
    }

    fn expr(&mut self, terminator: &str) -> Result<Expr> {
        let a = self.operand()?;
        if self.peek() == Some(terminator) {
            return Ok(Expr::Atom(a));
        }
        let sym = self.next()?;
        let op = [BinOp::Add, BinOp::Sub, BinOp::Mul]
            .into_iter()
            .find(|&op| op_symbol(op, self.lang) == sym)
            .ok_or_else(|| Error::Input(format!("{}: unknown operator {sym:?}", self.lang)))?;
        let b = self.operand()?;
        Ok(Expr::Binary(a, op, b))
    }

    fn stmt(&mut self) -> Result<Stmt> {
        let (close, term) = match self.lang {
            Language::Alpha => ("}", ";"),
            Language::Beta => ("end", "."),
        };
        match self.peek() {
            Some("loop") => {
                self.next()?;
                let n = self
                    .next()?
                    .parse::<u32>()
                    .map_err(|_| Error::Input(format!("{}: loop count must be an integer", self.lang)))?;
                self.expect(if self.lang == Language::Alpha { "{" } else { "do" })?;
                let mut body = Vec::new();
                while self.peek() != Some(close) {
                    if self.peek().is_none() {
                        return Err(Error::Input(format!("{}: unterminated loop", self.lang)));
                    }
                    body.push(self.stmt()?);
                }
                self.expect(close)?;
                Ok(Stmt::Loop(n, body))
            }
            Some("print") if self.lang == Language::Alpha => {
                self.next()?;
                let o = self.operand()?;
                self.expect(term)?;
                Ok(Stmt::Print(o))
            }
            Some("show") if self.lang == Language::Beta => {
                self.next()?;
                let o = self.operand()?;
                self.expect(term)?;
                Ok(Stmt::Print(o))
            }
            Some("set") if self.lang == Language::Beta => {
                self.next()?;
                let v = self.var()?;
                self.expect("to")?;
                let e = self.expr(term)?;
                self.expect(term)?;
                Ok(Stmt::Assign(v, e))
            }
            Some(_) if self.lang == Language::Alpha => {
                let v = self.var()?;
                self.expect("=")?;
                let e = self.expr(term)?;
                self.expect(term)?;
                Ok(Stmt::Assign(v, e))
            }
            Some(t) => Err(Error::Input(format!("{}: unexpected token {t:?}", self.lang))),
            None => Err(Error::Input(format!("{}: unexpected end of program", self.lang))),
        }
    }
}

pub fn parse(text: &str, lang: Language) -> Result<Program> {
    let mut t = Tokens { toks: text.split_whitespace().collect(), pos: 0, lang };
    let mut stmts = Vec::new();
    while t.peek().is_some() {
        stmts.push(t.stmt()?);
    }
    if stmts.is_empty() {
        return Err(Error::Input(format!("{lang}: empty program")));
    }
    Ok(Program(stmts))
}

// ------------------------------------------------------------- generation

fn random_operand(rng: &mut Rng, assigned: &[usize]) -> Operand {
    match rng.random_range(0..10) {
        0..=3 if !assigned.is_empty() => Operand::Var(*assigned.choose(rng).unwrap()),
        0..=5 => Operand::Input,
        _ => Operand::Lit(rng.random_range(1..10)),
    }
}

fn random_assign(rng: &mut Rng, assigned: &mut Vec<usize>) -> Stmt {
    let expr = if rng.random_bool(0.75) {
        let op = *[BinOp::Add, BinOp::Sub, BinOp::Mul].choose(rng).unwrap();
        Expr::Binary(random_operand(rng, assigned), op, random_operand(rng, assigned))
    } else {
        Expr::Atom(random_operand(rng, assigned))
    };
    let target = rng.random_range(0..VARIABLES.len());
    if !assigned.contains(&target) {
        assigned.push(target);
    }
    Stmt::Assign(target, expr)
}

/// A well-formed program: every read of a variable follows an assignment
/// to it in textual order, and the program ends by printing.
pub fn generate_program(rng: &mut Rng) -> Program {
    let mut assigned = Vec::new();
    let mut stmts = Vec::new();
    let n_body = rng.random_range(1..=3);
    let mut used_loop = false;
    for _ in 0..n_body {
        if !used_loop && !assigned.is_empty() && rng.random_bool(0.35) {
            used_loop = true;
            let n = rng.random_range(2..=4);
            let inner = (0..rng.random_range(1..=2)).map(|_| random_assign(rng, &mut assigned)).collect();
            stmts.push(Stmt::Loop(n, inner));
        } else {
            stmts.push(random_assign(rng, &mut assigned));
        }
    }
    let out = if assigned.is_empty() { Operand::Input } else { Operand::Var(*assigned.choose(rng).unwrap()) };
    stmts.push(Stmt::Print(out));
    Program(stmts)
}

/// Plants a use-before-assign defect: one read in the first statement, where
/// nothing is assigned yet, is redirected to a variable the program never
/// assigns.
pub fn plant_defect(rng: &mut Rng, program: &Program) -> Program {
    let mut p = program.clone();
    let assigned = p.assigned_vars();
    let unassigned: Vec<usize> = (0..VARIABLES.len()).filter(|v| !assigned.contains(v)).collect();
    let victim = *unassigned.choose(rng).expect("programs assign at most four variables");
    let first_stmt_reads = match p.0.first() {
        Some(Stmt::Assign(_, Expr::Binary(..))) => 2,
        _ => 1,
    };
    let mut sites = p.read_sites();
    let idx = rng.random_range(0..first_stmt_reads);
    *sites[idx] = Operand::Var(victim);
    p
}
