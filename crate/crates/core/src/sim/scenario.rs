//! Scenario files and their validation.
//!
//! A scenario is a line-oriented text file with `[section]` headers:
//!
//! ```text
//! [config]
//! seed = 7
//! strategy = nested        # or flatten; unset picks per action
//! horizon = 2000
//! latency = 1..3
//!
//! [nodes]
//! n1 n2
//!
//! [objects]
//! x n1 10                  # name home initial
//!
//! [action Move]
//! footprint = x y
//! test = x + y == 10
//! role a:
//!   read x
//!   write x = x - 1
//!
//! [clients]
//! c1 Move a n1 0           # label action role node time [within label]
//!
//! [faults]
//! crash n2 at 5
//! recover n2 at 20
//! ```
//!
//! `#` starts a comment. Clients sharing a label contribute roles to the same
//! top-level instance. `within L` makes the client try to enter the action as
//! a nested action of label `L`'s current instance.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::ca_action::{AcceptanceTest, CAActionDef, Expr, Library, Mode, Role, Step};
use crate::mapping::Strategy;
use crate::object_store::NodeId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ValidationError {
    /// 1-based line in the scenario file, when the error has one.
    pub line: Option<usize>,
    pub msg: String,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.msg),
            None => f.write_str(&self.msg),
        }
    }
}

fn verr(line: Option<usize>, msg: impl Into<String>) -> ValidationError {
    ValidationError { line, msg: msg.into() }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    pub seed: u64,
    pub strategy: Option<Strategy>,
    pub horizon: u64,
    /// Inclusive bounds of per-message latency.
    pub latency: (u64, u64),
}

impl Default for Config {
    fn default() -> Self {
        Config { seed: 0, strategy: None, horizon: 10_000, latency: (1, 3) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Client {
    pub label: String,
    pub action: String,
    pub role: String,
    pub node: NodeId,
    pub time: u64,
    pub within: Option<String>,
    pub line: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    Crash,
    Recover,
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FaultKind::Crash => "crash",
            FaultKind::Recover => "recover",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fault {
    pub time: u64,
    pub kind: FaultKind,
    pub node: NodeId,
    pub line: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectDecl {
    pub name: String,
    pub home: NodeId,
    pub initial: i64,
    pub line: Option<usize>,
}

/// One joint submission: `(client label, node, role, time)`.
pub type Contribution = (String, NodeId, String, u64);

#[derive(Debug, Clone, Default)]
pub struct Scenario {
    pub config: Config,
    pub nodes: Vec<NodeId>,
    pub objects: Vec<ObjectDecl>,
    pub library: Library,
    pub clients: Vec<Client>,
    pub faults: Vec<Fault>,
    action_lines: BTreeMap<String, usize>,
}

impl Scenario {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, name: &str) -> &mut Self {
        self.nodes.push(NodeId::new(name));
        self
    }

    pub fn add_object(&mut self, name: &str, home: &str, initial: i64) -> &mut Self {
        self.objects.push(ObjectDecl { name: name.into(), home: NodeId::new(home), initial, line: None });
        self
    }

    pub fn add_action(&mut self, def: CAActionDef) -> &mut Self {
        self.library.insert(def);
        self
    }

    /// Schedules the contributions of one joint submission of `action`.
    /// Roles must be distinct and nodes must exist.
    pub fn submit_joint(&mut self, label: &str, action: &str, contributions: &[Contribution]) -> Result<(), ValidationError> {
        let mut roles = BTreeSet::new();
        for (_, node, role, _) in contributions {
            if !roles.insert(role) {
                return Err(verr(None, format!("duplicate role `{role}` in submission of `{action}`")));
            }
            if !self.nodes.contains(node) {
                return Err(verr(None, format!("unknown node `{node}`")));
            }
        }
        for (client, node, role, time) in contributions {
            let _ = client;
            self.clients.push(Client {
                label: label.to_owned(),
                action: action.to_owned(),
                role: role.clone(),
                node: node.clone(),
                time: *time,
                within: None,
                line: None,
            });
        }
        Ok(())
    }

    /// Adds a crash or recovery; it must agree with the node's state at that time.
    pub fn inject_fault(&mut self, time: u64, kind: FaultKind, node: &str) -> Result<(), ValidationError> {
        let node = NodeId::new(node);
        if !self.nodes.contains(&node) {
            return Err(verr(None, format!("unknown node `{node}`")));
        }
        let mut faults = self.faults.clone();
        faults.push(Fault { time, kind, node, line: None });
        check_faults(&faults, self.config.horizon)?;
        self.faults = faults;
        Ok(())
    }

    pub fn object_names(&self) -> BTreeSet<String> {
        self.objects.iter().map(|o| o.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        let mut nodes = BTreeSet::new();
        for n in &self.nodes {
            if !nodes.insert(n) {
                return Err(verr(None, format!("duplicate node `{n}`")));
            }
        }
        let mut objs = BTreeSet::new();
        for o in &self.objects {
            if !nodes.contains(&o.home) {
                return Err(verr(o.line, format!("object `{}` is homed at unknown node `{}`", o.name, o.home)));
            }
            if !objs.insert(o.name.clone()) {
                return Err(verr(o.line, format!("duplicate object `{}`", o.name)));
            }
        }
        self.library
            .validate(&objs)
            .map_err(|(a, e)| verr(self.action_lines.get(&a).copied(), format!("action `{a}`: {e}")))?;
        let labels: BTreeSet<&str> = self.clients.iter().map(|c| c.label.as_str()).collect();
        let mut taken: BTreeSet<(&str, &str)> = BTreeSet::new();
        for c in &self.clients {
            let def = self
                .library
                .get(&c.action)
                .ok_or_else(|| verr(c.line, format!("client `{}` submits unknown action `{}`", c.label, c.action)))?;
            if def.role(&c.role).is_none() {
                return Err(verr(c.line, format!("action `{}` has no role `{}`", c.action, c.role)));
            }
            if !nodes.contains(&c.node) {
                return Err(verr(c.line, format!("unknown node `{}`", c.node)));
            }
            match &c.within {
                Some(w) if !labels.contains(w.as_str()) || w == &c.label => {
                    return Err(verr(c.line, format!("`within` names unknown client label `{w}`")));
                }
                Some(_) => {}
                None => {
                    if !taken.insert((&c.label, &c.role)) {
                        return Err(verr(c.line, format!("duplicate role `{}` for client `{}`", c.role, c.label)));
                    }
                    if self.clients.iter().any(|o| o.label == c.label && o.within.is_none() && o.action != c.action) {
                        return Err(verr(c.line, format!("client `{}` mixes actions", c.label)));
                    }
                }
            }
            if c.time > self.config.horizon {
                return Err(verr(c.line, "client time beyond the horizon"));
            }
        }
        for f in &self.faults {
            if !nodes.contains(&f.node) {
                return Err(verr(f.line, format!("unknown node `{}`", f.node)));
            }
        }
        check_faults(&self.faults, self.config.horizon)?;
        if self.config.latency.0 == 0 || self.config.latency.0 > self.config.latency.1 {
            return Err(verr(None, "latency must be a range A..B with 1 <= A <= B"));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Scenario, ValidationError> {
        let sc = Scenario::parse_unchecked(text)?;
        sc.validate()?;
        Ok(sc)
    }

    /// Syntax only; call [`Scenario::validate`] before running.
    pub fn parse_unchecked(text: &str) -> Result<Scenario, ValidationError> {
        Parser::default().run(text)
    }
}

impl FromStr for Scenario {
    type Err = ValidationError;
    fn from_str(s: &str) -> Result<Self, ValidationError> {
        Scenario::parse(s)
    }
}

fn check_faults(faults: &[Fault], horizon: u64) -> Result<(), ValidationError> {
    let mut sorted: Vec<&Fault> = faults.iter().collect();
    sorted.sort_by_key(|f| f.time);
    let mut down: BTreeSet<&NodeId> = BTreeSet::new();
    for f in sorted {
        if f.time > horizon {
            return Err(verr(f.line, format!("{} of `{}` at {} is beyond the horizon", f.kind, f.node, f.time)));
        }
        let consistent = match f.kind {
            FaultKind::Crash => down.insert(&f.node),
            FaultKind::Recover => down.remove(&f.node),
        };
        if !consistent {
            return Err(verr(
                f.line,
                format!("inconsistent fault: {} of `{}` at {} contradicts its state", f.kind, f.node, f.time),
            ));
        }
    }
    Ok(())
}

#[derive(Default)]
enum Section {
    #[default]
    None,
    Config,
    Nodes,
    Objects,
    Action(String),
    Clients,
    Faults,
}

#[derive(Default)]
struct Parser {
    sc: Scenario,
    section: Section,
    role: Option<usize>,
}

impl Parser {
    fn run(mut self, text: &str) -> Result<Scenario, ValidationError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or_default();
            if content.trim().is_empty() {
                continue;
            }
            let indented = content.starts_with(char::is_whitespace);
            self.line(line, content.trim(), indented)?;
        }
        Ok(self.sc)
    }

    fn line(&mut self, line: usize, s: &str, indented: bool) -> Result<(), ValidationError> {
        let err = |m: String| verr(Some(line), m);
        if let Some(h) = s.strip_prefix('[') {
            let h = h.strip_suffix(']').ok_or_else(|| err("unterminated section header".into()))?.trim();
            self.role = None;
            self.section = match h.split_whitespace().collect::<Vec<_>>().as_slice() {
                ["config"] => Section::Config,
                ["nodes"] => Section::Nodes,
                ["objects"] => Section::Objects,
                ["clients"] => Section::Clients,
                ["faults"] => Section::Faults,
                ["action", name] => {
                    if self.sc.library.get(name).is_some() {
                        return Err(err(format!("duplicate action `{name}`")));
                    }
                    self.sc.library.insert(CAActionDef::new(name));
                    self.sc.action_lines.insert((*name).to_owned(), line);
                    Section::Action((*name).to_owned())
                }
                _ => return Err(err(format!("unknown section `[{h}]`"))),
            };
            return Ok(());
        }
        match &self.section {
            Section::None => Err(err("content before the first section".into())),
            Section::Config => self.config(line, s),
            Section::Nodes => {
                self.sc.nodes.extend(s.split_whitespace().map(NodeId::new));
                Ok(())
            }
            Section::Objects => {
                let [name, home, init] = s.split_whitespace().collect::<Vec<_>>()[..] else {
                    return Err(err("expected `name node initial`".into()));
                };
                let initial = init.parse().map_err(|_| err(format!("bad initial value `{init}`")))?;
                self.sc.objects.push(ObjectDecl { name: name.into(), home: NodeId::new(home), initial, line: Some(line) });
                Ok(())
            }
            Section::Action(name) => {
                let name = name.clone();
                self.action(line, &name, s, indented)
            }
            Section::Clients => {
                let toks: Vec<&str> = s.split_whitespace().collect();
                let (within, base) = match toks.as_slice() {
                    [base @ .., "within", w] if base.len() == 5 => (Some((*w).to_owned()), base),
                    base if base.len() == 5 => (None, base),
                    _ => return Err(err("expected `label action role node time [within label]`".into())),
                };
                let time = base[4].parse().map_err(|_| err(format!("bad time `{}`", base[4])))?;
                self.sc.clients.push(Client {
                    label: base[0].into(),
                    action: base[1].into(),
                    role: base[2].into(),
                    node: NodeId::new(base[3]),
                    time,
                    within,
                    line: Some(line),
                });
                Ok(())
            }
            Section::Faults => {
                let [kind, node, "at", t] = s.split_whitespace().collect::<Vec<_>>()[..] else {
                    return Err(err("expected `crash|recover node at time`".into()));
                };
                let kind = match kind {
                    "crash" => FaultKind::Crash,
                    "recover" => FaultKind::Recover,
                    _ => return Err(err(format!("unknown fault `{kind}`"))),
                };
                let time = t.parse().map_err(|_| err(format!("bad time `{t}`")))?;
                self.sc.faults.push(Fault { time, kind, node: NodeId::new(node), line: Some(line) });
                Ok(())
            }
        }
    }

    fn config(&mut self, line: usize, s: &str) -> Result<(), ValidationError> {
        let err = |m: String| verr(Some(line), m);
        let (k, v) = s.split_once('=').ok_or_else(|| err("expected `key = value`".into()))?;
        let (k, v) = (k.trim(), v.trim());
        let c = &mut self.sc.config;
        match k {
            "seed" => c.seed = v.parse().map_err(|_| err(format!("bad seed `{v}`")))?,
            "strategy" => c.strategy = Some(v.parse().map_err(err)?),
            "horizon" => c.horizon = v.parse().map_err(|_| err(format!("bad horizon `{v}`")))?,
            "latency" => c.latency = parse_range(v).ok_or_else(|| err(format!("bad latency range `{v}`")))?,
            _ => return Err(err(format!("unknown config key `{k}`"))),
        }
        Ok(())
    }

    fn action(&mut self, line: usize, name: &str, s: &str, indented: bool) -> Result<(), ValidationError> {
        let err = |m: String| verr(Some(line), m);
        let n_tests = self.sc.library.get(name).map_or(0, |d| d.tests.len());
        let mut def = self.sc.library.get(name).expect("section action exists").clone();
        if indented {
            let r = self.role.ok_or_else(|| err("step outside a role".into()))?;
            def.roles[r].body.push(parse_step(s).map_err(err)?);
        } else if let Some(role) = s.strip_prefix("role ") {
            let role = role.trim().strip_suffix(':').ok_or_else(|| err("expected `role NAME:`".into()))?.trim();
            def.roles.push(Role { name: role.to_owned(), body: Vec::new() });
            self.role = Some(def.roles.len() - 1);
        } else {
            self.role = None;
            let (k, v) = s.split_once('=').ok_or_else(|| err("expected `key = value`".into()))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "mode" => def.mode = v.parse::<Mode>().map_err(err)?,
                "deadline" => def.deadline = v.parse().map_err(|_| err(format!("bad deadline `{v}`")))?,
                "footprint" => def.footprint.extend(v.split_whitespace().map(str::to_owned)),
                "nested" => def.nested.extend(v.split_whitespace().map(str::to_owned)),
                "escalate" => {
                    def.escalate = match v {
                        "yes" | "true" => true,
                        "no" | "false" => false,
                        _ => return Err(err(format!("bad escalate flag `{v}`"))),
                    }
                }
                "order" => {
                    let names: Vec<&str> = v.split('<').map(str::trim).collect();
                    if names.len() < 2 || names.iter().any(|n| n.is_empty()) {
                        return Err(err("expected `order = A < B`".into()));
                    }
                    for w in names.windows(2) {
                        def.order.push((w[0].to_owned(), w[1].to_owned()));
                    }
                }
                "test" => {
                    let t = AcceptanceTest::parse(&format!("t{}", n_tests + 1), v).map_err(err)?;
                    def.tests.push(t);
                }
                _ => return Err(err(format!("unknown action key `{k}`"))),
            }
        }
        self.sc.library.insert(def);
        Ok(())
    }
}

/// Parses an inclusive range `A..B`.
pub fn parse_range(s: &str) -> Option<(u64, u64)> {
    let (a, b) = s.split_once("..")?;
    let r = (a.trim().parse().ok()?, b.trim().parse().ok()?);
    (r.0 <= r.1).then_some(r)
}

fn parse_step(s: &str) -> Result<Step, String> {
    let (op, rest) = s.split_once(char::is_whitespace).map_or((s, ""), |(a, b)| (a, b.trim()));
    let one = |what: &str| -> Result<String, String> {
        let mut it = rest.split_whitespace();
        match (it.next(), it.next()) {
            (Some(n), None) => Ok(n.to_owned()),
            _ => Err(format!("`{op}` takes one {what}")),
        }
    };
    match op {
        "read" => Ok(Step::Read(one("object")?)),
        "emit" => Ok(Step::Emit(one("signal")?)),
        "await" => Ok(Step::Await(one("signal")?)),
        "exit" if rest.is_empty() => Ok(Step::Exit),
        "write" => {
            let (obj, e) = rest.split_once('=').ok_or("expected `write OBJ = EXPR`")?;
            let obj = obj.trim();
            if obj.is_empty() || obj.contains(char::is_whitespace) {
                return Err("expected `write OBJ = EXPR`".into());
            }
            Ok(Step::Write(obj.to_owned(), e.trim().parse::<Expr>()?))
        }
        "enter" => match rest.split_whitespace().collect::<Vec<_>>()[..] {
            [action, "as", role] => Ok(Step::Enter { action: action.into(), role: role.into() }),
            _ => Err("expected `enter ACTION as ROLE`".into()),
        },
        _ => Err(format!("unknown step `{s}`")),
    }
}
