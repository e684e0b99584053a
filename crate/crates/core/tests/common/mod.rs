#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use coact::object_store::parse_dump_line;
use coact::sim::{run, RunResult, Scenario, SimOptions};
use coact::trace::{Event, Kind};
use coact::txn_engine::TransactionId;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn scenario_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/scenarios")
}

pub fn load(rel: &str) -> Scenario {
    let p = scenario_dir().join(rel);
    let text = std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    Scenario::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) {
    let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            if p.file_name().is_some_and(|n| n != "invalid") {
                walk(&p, out);
            }
        } else if p.extension().is_some_and(|e| e == "scn") {
            out.push(p);
        }
    }
}

/// Every runnable scenario file, relative to the scenario directory.
pub fn corpus() -> Vec<String> {
    let mut out = Vec::new();
    walk(&scenario_dir(), &mut out);
    out.iter().map(|p| p.strip_prefix(scenario_dir()).unwrap().to_string_lossy().into_owned()).collect()
}

pub fn sim(sc: &Scenario, opts: &SimOptions) -> RunResult {
    run(sc, opts).expect("valid scenario")
}

pub fn values(dump: &str) -> BTreeMap<String, i64> {
    dump.lines()
        .filter_map(parse_dump_line)
        .map(|e| (e.object, e.value.as_int().expect("int value")))
        .collect()
}

/// Random scenario of 2..=5 one-role actions over 2..=3 objects. Every
/// action is its own top-level instance.
pub fn competitive(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n_nodes = rng.random_range(1..=3);
    let n_objs = rng.random_range(2..=3);
    let n_acts = rng.random_range(2..=5);
    let nodes: Vec<String> = (1..=n_nodes).map(|i| format!("n{i}")).collect();
    let objs = ["x", "y", "z"];
    let mut s = format!("[config]\nseed = {seed}\nlatency = 1..3\n\n[nodes]\n{}\n\n[objects]\n", nodes.join(" "));
    for o in &objs[..n_objs] {
        s += &format!("{o} {} {}\n", nodes.choose(&mut rng).unwrap(), rng.random_range(0..10));
    }
    let mut clients = String::new();
    for a in 0..n_acts {
        let mut body = String::new();
        let mut read = BTreeSet::new();
        let mut used = BTreeSet::new();
        for _ in 0..rng.random_range(1..=4) {
            let o = objs[rng.random_range(0..n_objs)];
            used.insert(o);
            if rng.random_bool(0.5) || read.is_empty() {
                body += &format!("  read {o}\n");
                read.insert(o);
            } else {
                let src: Vec<&&str> = read.iter().collect();
                let src = src.choose(&mut rng).unwrap();
                body += &format!("  write {o} = {src} + {}\n", rng.random_range(1..5));
            }
        }
        let fp: Vec<&str> = used.into_iter().collect();
        s += &format!("\n[action A{a}]\nfootprint = {}\nrole r:\n{body}", fp.join(" "));
        clients += &format!("c{a} A{a} r {} {}\n", nodes.choose(&mut rng).unwrap(), rng.random_range(0..8));
    }
    s += &format!("\n[clients]\n{clients}");
    Scenario::parse(&s).unwrap_or_else(|e| panic!("generated scenario: {e}\n{s}"))
}

// ---- conflict equivalence by brute force --------------------------------

fn roots(events: &[Event]) -> BTreeMap<TransactionId, TransactionId> {
    let mut root = BTreeMap::new();
    for e in events.iter().filter(|e| e.kind == Kind::Begin) {
        let t = e.txn.unwrap();
        let r = match e.detail.get("parent") {
            Some(p) => root[&p.parse::<TransactionId>().unwrap()],
            None => t,
        };
        root.insert(t, r);
    }
    root
}

pub fn committed(events: &[Event]) -> Vec<TransactionId> {
    let mut v: Vec<TransactionId> = events
        .iter()
        .filter(|e| e.kind == Kind::Commit2 && e.detail.has("decide"))
        .map(|e| e.txn.unwrap())
        .collect();
    v.sort();
    v.dedup();
    v
}

/// Ordered pairs `(a, b)` of committed roots such that an operation of `a`
/// conflicts with a later operation of `b`.
pub fn conflict_pairs(events: &[Event]) -> BTreeSet<(TransactionId, TransactionId)> {
    let root = roots(events);
    let done: BTreeSet<TransactionId> = committed(events).into_iter().collect();
    let ops: Vec<(TransactionId, &str, bool)> = events
        .iter()
        .filter(|e| matches!(e.kind, Kind::Read | Kind::Write) && !e.detail.has("undo"))
        .map(|e| (root[&e.txn.unwrap()], e.obj.as_deref().unwrap(), e.kind == Kind::Write))
        .filter(|(r, _, _)| done.contains(r))
        .collect();
    let mut pairs = BTreeSet::new();
    for (i, a) in ops.iter().enumerate() {
        for b in &ops[i + 1..] {
            if a.0 != b.0 && a.1 == b.1 && (a.2 || b.2) {
                pairs.insert((a.0, b.0));
            }
        }
    }
    pairs
}

fn permutations(items: &[TransactionId]) -> Vec<Vec<TransactionId>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let x = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, x);
            out.push(p);
        }
    }
    out
}

pub fn respects(order: &[TransactionId], pairs: &BTreeSet<(TransactionId, TransactionId)>) -> bool {
    let pos: BTreeMap<_, _> = order.iter().enumerate().map(|(i, t)| (*t, i)).collect();
    pairs.iter().all(|(a, b)| pos[a] < pos[b])
}

/// Serial orders of the committed roots that are conflict-equivalent to the
/// trace.
pub fn equivalent_orders(events: &[Event]) -> Vec<Vec<TransactionId>> {
    let ts = committed(events);
    let pairs = conflict_pairs(events);
    permutations(&ts).into_iter().filter(|p| respects(p, &pairs)).collect()
}

// ---- Moss rule table ----------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    Grant,
    Queue,
    Die,
}

/// Independent model of lock holders, ancestry and ages.
#[derive(Debug, Default)]
pub struct LockOracle {
    pub parent: BTreeMap<u64, Option<u64>>,
    /// object -> holder -> writes?
    pub held: BTreeMap<String, BTreeMap<u64, bool>>,
}

impl LockOracle {
    pub fn root(&self, mut t: u64) -> u64 {
        while let Some(Some(p)) = self.parent.get(&t) {
            t = *p;
        }
        t
    }

    pub fn is_ancestor_or_self(&self, a: u64, mut t: u64) -> bool {
        loop {
            if a == t {
                return true;
            }
            match self.parent.get(&t) {
                Some(Some(p)) => t = *p,
                _ => return false,
            }
        }
    }

    fn older(&self, a: u64, b: u64) -> bool {
        let (ra, rb) = (self.root(a), self.root(b));
        if ra != rb {
            ra < rb
        } else {
            a < b
        }
    }

    /// The rule table: a request conflicts with holders that are not
    /// ancestors and where either side writes.
    pub fn decide(&self, t: u64, obj: &str, write: bool) -> Rule {
        let holders = self.held.get(obj).cloned().unwrap_or_default();
        if let Some(w) = holders.get(&t) {
            if *w || !write {
                return Rule::Grant;
            }
        }
        let conflicting: Vec<u64> = holders
            .iter()
            .filter(|(h, hw)| !self.is_ancestor_or_self(**h, t) && (write || **hw))
            .map(|(h, _)| *h)
            .collect();
        if conflicting.is_empty() {
            Rule::Grant
        } else if conflicting.iter().all(|h| self.older(t, *h)) {
            Rule::Queue
        } else {
            Rule::Die
        }
    }

    pub fn grant(&mut self, t: u64, obj: &str, write: bool) {
        let e = self.held.entry(obj.to_owned()).or_default().entry(t).or_insert(false);
        *e |= write;
    }

    /// Nested commit: the parent takes over the child's locks.
    pub fn commit_nested(&mut self, t: u64) {
        let p = self.parent[&t].expect("nested");
        for hs in self.held.values_mut() {
            if let Some(w) = hs.remove(&t) {
                *hs.entry(p).or_insert(false) |= w;
            }
        }
    }
}

// ---- serial replay ------------------------------------------------------

/// Re-executes one-role actions serially in `order` and returns the final
/// object values. `action_of` maps each root to its action name.
pub fn serial_replay(
    sc: &Scenario,
    order: &[TransactionId],
    action_of: &BTreeMap<TransactionId, String>,
) -> BTreeMap<String, i64> {
    use coact::ca_action::Step;
    let mut vals: BTreeMap<String, i64> = sc.objects.iter().map(|o| (o.name.clone(), o.initial)).collect();
    for t in order {
        let def = sc.library.get(&action_of[t]).unwrap();
        let mut locals: BTreeMap<String, i64> = BTreeMap::new();
        for step in &def.roles[0].body {
            match step {
                Step::Read(o) => {
                    locals.insert(o.clone(), vals[o]);
                }
                Step::Write(o, e) => {
                    let v = e.eval(&|n| locals.get(n).copied()).unwrap();
                    vals.insert(o.clone(), v);
                }
                _ => {}
            }
        }
    }
    vals
}

/// Root transaction of each top-level instance, and its action name.
pub fn root_actions(events: &[Event]) -> BTreeMap<TransactionId, String> {
    let mut action_of_inst: BTreeMap<u64, String> = BTreeMap::new();
    for e in events.iter().filter(|e| e.kind == Kind::Register && !e.detail.has("rejected")) {
        if let (Some(i), Some(a)) = (e.inst(), e.detail.get("action")) {
            action_of_inst.insert(i, a.to_owned());
        }
    }
    let mut out = BTreeMap::new();
    for e in events.iter().filter(|e| e.kind == Kind::LineRecovery) {
        if let (Some(i), Some(t)) = (e.inst(), e.txn) {
            out.entry(t).or_insert_with(|| action_of_inst[&i].clone());
        }
    }
    out
}

/// Final values once every decided commit is installed: the stable dump
/// plus redo records that a crashed participant prepared but never applied.
pub fn effective_values(events: &[Event], dump: &str) -> BTreeMap<String, i64> {
    let decided: BTreeSet<TransactionId> = committed(events).into_iter().collect();
    let applied: BTreeSet<(TransactionId, &str)> = events
        .iter()
        .filter(|e| e.kind == Kind::Commit2 && e.detail.has("applied"))
        .filter_map(|e| Some((e.txn?, e.detail.get("node")?)))
        .collect();
    let mut vals = values(dump);
    for e in events.iter().filter(|e| e.kind == Kind::Commit1 && e.obj.is_some()) {
        let (t, node) = (e.txn.unwrap(), e.detail.get("node").unwrap());
        if decided.contains(&t) && !applied.contains(&(t, node)) {
            let v = coact::object_store::Value::from_hex(e.detail.get("val").unwrap()).unwrap();
            vals.insert(e.obj.clone().unwrap(), v.as_int().unwrap());
        }
    }
    vals
}
