//! Static action definitions: roles, role bodies, nesting and acceptance tests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Integer expression over names. In a write step a name is the value the
/// thread last read from that object; in an acceptance test it is the
/// object's tentative value at the test line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Int(i64),
    Name(String),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
}

impl Expr {
    /// `None` when a name is unbound or arithmetic overflows.
    pub fn eval(&self, lookup: &dyn Fn(&str) -> Option<i64>) -> Option<i64> {
        match self {
            Expr::Int(v) => Some(*v),
            Expr::Name(n) => lookup(n),
            Expr::Add(a, b) => a.eval(lookup)?.checked_add(b.eval(lookup)?),
            Expr::Sub(a, b) => a.eval(lookup)?.checked_sub(b.eval(lookup)?),
            Expr::Mul(a, b) => a.eval(lookup)?.checked_mul(b.eval(lookup)?),
            Expr::Neg(a) => a.eval(lookup)?.checked_neg(),
        }
    }

    pub fn names(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Int(_) => {}
            Expr::Name(n) => {
                out.insert(n.clone());
            }
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => {
                a.names(out);
                b.names(out);
            }
            Expr::Neg(a) => a.names(out),
        }
    }
}

impl FromStr for Expr {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let toks = tokenize(s)?;
        let mut p = ExprParser { toks: &toks, pos: 0 };
        let e = p.sum()?;
        if p.pos != toks.len() {
            return Err(format!("unexpected `{}`", toks[p.pos]));
        }
        Ok(e)
    }
}

fn is_name_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.'
}

fn tokenize(s: &str) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    let mut chars = s.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if "+-*()".contains(c) {
            out.push(c.to_string());
            chars.next();
        } else if is_name_char(c) {
            let mut tok = String::new();
            while let Some(&c) = chars.peek().filter(|c| is_name_char(**c)) {
                tok.push(c);
                chars.next();
            }
            out.push(tok);
        } else {
            return Err(format!("unexpected character `{c}`"));
        }
    }
    Ok(out)
}

struct ExprParser<'a> {
    toks: &'a [String],
    pos: usize,
}

impl ExprParser<'_> {
    fn peek(&self) -> Option<&str> {
        self.toks.get(self.pos).map(String::as_str)
    }

    fn sum(&mut self) -> Result<Expr, String> {
        let mut lhs = self.product()?;
        while let Some(op @ ("+" | "-")) = self.peek() {
            let add = op == "+";
            self.pos += 1;
            let rhs = self.product()?;
            lhs = if add { Expr::Add(lhs.into(), rhs.into()) } else { Expr::Sub(lhs.into(), rhs.into()) };
        }
        Ok(lhs)
    }

    fn product(&mut self) -> Result<Expr, String> {
        let mut lhs = self.atom()?;
        while self.peek() == Some("*") {
            self.pos += 1;
            lhs = Expr::Mul(lhs.into(), self.atom()?.into());
        }
        Ok(lhs)
    }

    fn atom(&mut self) -> Result<Expr, String> {
        let tok = self.peek().ok_or("expression ends early")?.to_owned();
        self.pos += 1;
        match tok.as_str() {
            "(" => {
                let e = self.sum()?;
                if self.peek() != Some(")") {
                    return Err("missing `)`".into());
                }
                self.pos += 1;
                Ok(e)
            }
            "-" => Ok(Expr::Neg(self.atom()?.into())),
            ")" | "+" | "*" => Err(format!("unexpected `{tok}`")),
            t if t.starts_with(|c: char| c.is_ascii_digit()) => {
                t.parse().map(Expr::Int).map_err(|_| format!("bad integer `{t}`"))
            }
            t => Ok(Expr::Name(t.to_owned())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn apply(self, a: i64, b: i64) -> bool {
        match self {
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
            CmpOp::Gt => a > b,
            CmpOp::Ge => a >= b,
        }
    }
}

/// A side-effect-free predicate `lhs op rhs` over object values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AcceptanceTest {
    pub name: String,
    pub lhs: Expr,
    pub op: CmpOp,
    pub rhs: Expr,
}

impl AcceptanceTest {
    pub fn parse(name: &str, s: &str) -> Result<Self, String> {
        for (tok, op) in [
            ("==", CmpOp::Eq),
            ("!=", CmpOp::Ne),
            ("<=", CmpOp::Le),
            (">=", CmpOp::Ge),
            ("<", CmpOp::Lt),
            (">", CmpOp::Gt),
        ] {
            if let Some((l, r)) = s.split_once(tok) {
                return Ok(AcceptanceTest { name: name.to_owned(), lhs: l.parse()?, op, rhs: r.parse()? });
            }
        }
        Err("acceptance test needs a comparison".into())
    }

    /// Fails when an object is missing or holds a non-integer value.
    pub fn eval(&self, view: &dyn Fn(&str) -> Option<i64>) -> bool {
        match (self.lhs.eval(view), self.rhs.eval(view)) {
            (Some(a), Some(b)) => self.op.apply(a, b),
            _ => false,
        }
    }

    pub fn objects(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.lhs.names(&mut out);
        self.rhs.names(&mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Read(String),
    Write(String, Expr),
    Emit(String),
    Await(String),
    Enter { action: String, role: String },
    Exit,
}

impl Step {
    pub fn object(&self) -> Option<&str> {
        match self {
            Step::Read(o) | Step::Write(o, _) => Some(o),
            _ => None,
        }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Step::Read(o) => write!(f, "read {o}"),
            Step::Write(o, _) => write!(f, "write {o}"),
            Step::Emit(s) => write!(f, "emit {s}"),
            Step::Await(s) => write!(f, "await {s}"),
            Step::Enter { action, role } => write!(f, "enter {action} as {role}"),
            Step::Exit => f.write_str("exit"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Role {
    pub name: String,
    pub body: Vec<Step>,
}

/// Which nestings an action admits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// No nested actions.
    Flat,
    /// Multi-role actions nest only multi-role actions, single-role only single-role.
    NestedSameKind,
    #[default]
    General,
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "flat" => Ok(Mode::Flat),
            "nested_same_kind" => Ok(Mode::NestedSameKind),
            "general" => Ok(Mode::General),
            _ => Err(format!("unknown mode `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CAActionDef {
    pub name: String,
    pub roles: Vec<Role>,
    pub nested: BTreeSet<String>,
    pub tests: Vec<AcceptanceTest>,
    /// `(a, b)`: an instance of `b` starts only after one of `a` finished.
    pub order: Vec<(String, String)>,
    pub mode: Mode,
    pub footprint: BTreeSet<String>,
    /// Virtual-time budget from first registration to full registration.
    pub deadline: u64,
    /// Abort the parent when this action aborts.
    pub escalate: bool,
}

pub const DEFAULT_DEADLINE: u64 = 100;

impl CAActionDef {
    pub fn new(name: &str) -> Self {
        CAActionDef {
            name: name.to_owned(),
            roles: Vec::new(),
            nested: BTreeSet::new(),
            tests: Vec::new(),
            order: Vec::new(),
            mode: Mode::default(),
            footprint: BTreeSet::new(),
            deadline: DEFAULT_DEADLINE,
            escalate: false,
        }
    }

    pub fn role(&self, name: &str) -> Option<&Role> {
        self.roles.iter().find(|r| r.name == name)
    }

    pub fn is_multi_role(&self) -> bool {
        self.roles.len() > 1
    }

    /// Names of actions that must finish before `action` may start.
    pub fn predecessors<'a>(&'a self, action: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.order.iter().filter(move |(_, b)| b == action).map(|(a, _)| a.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DefError {
    #[error("action has no roles")]
    NoRoles,
    #[error("duplicate role `{0}`")]
    DuplicateRole(String),
    #[error("unknown nested action `{0}`")]
    UnknownNested(String),
    #[error("nested action `{0}` has more roles than its parent")]
    NestedRoles(String),
    #[error("action `{0}` is nested inside itself")]
    NestingCycle(String),
    #[error("ordering constraints form a cycle through `{0}`")]
    CyclicOrder(String),
    #[error("ordering constraint names `{0}`, which is not a nested action")]
    OrderNotNested(String),
    #[error("footprint names unknown object `{0}`")]
    UnknownObject(String),
    #[error("role `{role}` accesses `{obj}` outside the footprint")]
    OutsideFootprint { role: String, obj: String },
    #[error("acceptance test `{test}` reads `{obj}` outside the footprint")]
    TestOutsideFootprint { test: String, obj: String },
    #[error("nested action `{nested}` footprint object `{obj}` is not in the parent footprint")]
    NestedFootprint { nested: String, obj: String },
    #[error("role `{role}` uses `{var}` before reading it")]
    UndefinedVariable { role: String, var: String },
    #[error("role `{role}` enters `{action}`, which is not declared nested")]
    EnterUndeclared { role: String, action: String },
    #[error("role `{role}` enters `{action}` as unknown role `{nested_role}`")]
    UnknownNestedRole { role: String, action: String, nested_role: String },
    #[error("role `{role}` enters `{action}` twice")]
    EnterTwice { role: String, action: String },
}

/// All definitions of a scenario, looked up by name.
#[derive(Debug, Clone, Default)]
pub struct Library {
    defs: BTreeMap<String, CAActionDef>,
}

impl Library {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, def: CAActionDef) -> Option<CAActionDef> {
        self.defs.insert(def.name.clone(), def)
    }

    pub fn get(&self, name: &str) -> Option<&CAActionDef> {
        self.defs.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &CAActionDef> {
        self.defs.values()
    }

    pub fn is_empty(&self) -> bool {
        self.defs.is_empty()
    }

    /// Checks every definition; errors name the offending action.
    pub fn validate(&self, objects: &BTreeSet<String>) -> Result<(), (String, DefError)> {
        for def in self.defs.values() {
            self.validate_def(def, objects).map_err(|e| (def.name.clone(), e))?;
        }
        for def in self.defs.values() {
            if self.reaches(&def.name, &def.name, &mut BTreeSet::new()) {
                return Err((def.name.clone(), DefError::NestingCycle(def.name.clone())));
            }
        }
        Ok(())
    }

    fn reaches(&self, from: &str, target: &str, seen: &mut BTreeSet<String>) -> bool {
        let Some(def) = self.defs.get(from) else { return false };
        for n in &def.nested {
            if n == target || (seen.insert(n.clone()) && self.reaches(n, target, seen)) {
                return true;
            }
        }
        false
    }

    fn validate_def(&self, def: &CAActionDef, objects: &BTreeSet<String>) -> Result<(), DefError> {
        if def.roles.is_empty() {
            return Err(DefError::NoRoles);
        }
        let mut names = BTreeSet::new();
        for r in &def.roles {
            if !names.insert(&r.name) {
                return Err(DefError::DuplicateRole(r.name.clone()));
            }
        }
        if let Some(o) = def.footprint.iter().find(|o| !objects.contains(*o)) {
            return Err(DefError::UnknownObject(o.clone()));
        }
        for t in &def.tests {
            if let Some(o) = t.objects().into_iter().find(|o| !def.footprint.contains(o)) {
                return Err(DefError::TestOutsideFootprint { test: t.name.clone(), obj: o });
            }
        }
        for n in &def.nested {
            let nd = self.defs.get(n).ok_or_else(|| DefError::UnknownNested(n.clone()))?;
            if nd.roles.len() > def.roles.len() {
                return Err(DefError::NestedRoles(n.clone()));
            }
            if let Some(o) = nd.footprint.iter().find(|o| !def.footprint.contains(*o)) {
                return Err(DefError::NestedFootprint { nested: n.clone(), obj: o.clone() });
            }
        }
        for (a, b) in &def.order {
            for x in [a, b] {
                if !def.nested.contains(x) {
                    return Err(DefError::OrderNotNested(x.clone()));
                }
            }
        }
        if let Some(c) = order_cycle(&def.order) {
            return Err(DefError::CyclicOrder(c));
        }
        for r in &def.roles {
            self.validate_role(def, r)?;
        }
        Ok(())
    }

    fn validate_role(&self, def: &CAActionDef, r: &Role) -> Result<(), DefError> {
        let mut read = BTreeSet::new();
        let mut entered = BTreeSet::new();
        for step in &r.body {
            if let Some(o) = step.object() {
                if !def.footprint.contains(o) {
                    return Err(DefError::OutsideFootprint { role: r.name.clone(), obj: o.to_owned() });
                }
            }
            match step {
                Step::Read(o) => {
                    read.insert(o.clone());
                }
                Step::Write(_, e) => {
                    let mut used = BTreeSet::new();
                    e.names(&mut used);
                    if let Some(v) = used.into_iter().find(|v| !read.contains(v)) {
                        return Err(DefError::UndefinedVariable { role: r.name.clone(), var: v });
                    }
                }
                Step::Enter { action, role } => {
                    if !def.nested.contains(action) {
                        return Err(DefError::EnterUndeclared { role: r.name.clone(), action: action.clone() });
                    }
                    let nd = self.defs.get(action).ok_or_else(|| DefError::UnknownNested(action.clone()))?;
                    if nd.role(role).is_none() {
                        return Err(DefError::UnknownNestedRole {
                            role: r.name.clone(),
                            action: action.clone(),
                            nested_role: role.clone(),
                        });
                    }
                    if !entered.insert(action.clone()) {
                        return Err(DefError::EnterTwice { role: r.name.clone(), action: action.clone() });
                    }
                }
                Step::Emit(_) | Step::Await(_) | Step::Exit => {}
            }
        }
        Ok(())
    }
}

/// Returns a node on a cycle of the constraint graph, if any.
pub fn order_cycle(order: &[(String, String)]) -> Option<String> {
    let mut indeg: BTreeMap<&str, usize> = BTreeMap::new();
    for (a, b) in order {
        indeg.entry(a).or_default();
        *indeg.entry(b).or_default() += 1;
    }
    let mut ready: Vec<&str> = indeg.iter().filter(|(_, d)| **d == 0).map(|(n, _)| *n).collect();
    while let Some(n) = ready.pop() {
        for (_, b) in order.iter().filter(|(a, _)| a == n) {
            let d = indeg.get_mut(b.as_str()).expect("node");
            *d -= 1;
            if *d == 0 {
                ready.push(b);
            }
        }
        indeg.remove(n);
    }
    indeg.keys().next().map(|s| (*s).to_owned())
}
