//! Trace scans. Every check here works from the trace (and the final stable
//! dump) alone, so a trace file read back from disk audits the same as the
//! run that produced it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::object_store::DumpEntry;
use crate::trace::{Event, Kind};
use crate::txn_engine::serializability::{audit_serializability, is_operation, MalformedTrace, SerializabilityVerdict, TxnForest};
use crate::txn_engine::TransactionId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub seq: Option<u64>,
    pub msg: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.seq {
            Some(s) => write!(f, "event {s}: {}", self.msg),
            None => f.write_str(&self.msg),
        }
    }
}

fn at(e: &Event, msg: String) -> Violation {
    Violation { seq: Some(e.seq), msg }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditSuite {
    pub serializability: SerializabilityVerdict,
    pub smuggling: Vec<Violation>,
    pub strictness: Vec<Violation>,
    pub bracketing: Vec<Violation>,
    pub unanimity: Vec<Violation>,
    pub atomicity: Vec<Violation>,
}

impl AuditSuite {
    pub fn passed(&self) -> bool {
        self.serializability.is_serializable() && self.scans().iter().all(|(_, v)| v.is_empty())
    }

    pub fn scans(&self) -> [(&'static str, &[Violation]); 5] {
        [
            ("smuggling", &self.smuggling),
            ("strictness", &self.strictness),
            ("bracketing", &self.bracketing),
            ("unanimity", &self.unanimity),
            ("atomicity", &self.atomicity),
        ]
    }
}

pub fn audit_trace(events: &[Event], dump: &[DumpEntry]) -> Result<AuditSuite, MalformedTrace> {
    Ok(AuditSuite {
        serializability: audit_serializability(events)?,
        smuggling: smuggling_scan(events)?,
        strictness: strictness_scan(events)?,
        bracketing: bracketing_scan(events)?,
        unanimity: unanimity_scan(events)?,
        atomicity: atomicity_scan(events, dump)?,
    })
}

fn malformed(e: &Event, msg: &str) -> MalformedTrace {
    MalformedTrace { seq: e.seq, msg: msg.to_owned() }
}

fn obj_of(e: &Event) -> Result<&str, MalformedTrace> {
    e.obj.as_deref().ok_or_else(|| malformed(e, "event without object"))
}

fn txn_of(e: &Event) -> Result<TransactionId, MalformedTrace> {
    e.txn.ok_or_else(|| malformed(e, "event without transaction"))
}

/// Object homes from `create` events.
fn homes(events: &[Event]) -> Result<BTreeMap<String, String>, MalformedTrace> {
    let mut out = BTreeMap::new();
    for e in events.iter().filter(|e| e.kind == Kind::Create) {
        let node = e.detail.get("node").ok_or_else(|| malformed(e, "create without node"))?;
        out.insert(obj_of(e)?.to_owned(), node.to_owned());
    }
    Ok(out)
}

/// Who wrote the current tentative value of each object, as seen in the
/// trace: a stack of writers per object, popped by undo restorations and
/// cleared by decisions and crashes.
struct WriterTracker {
    forest: TxnForest,
    homes: BTreeMap<String, String>,
    stacks: BTreeMap<String, Vec<(TransactionId, Option<u64>)>>,
    /// Nested transactions that committed into their parent.
    promoted: BTreeMap<TransactionId, TransactionId>,
    /// Nested instances that committed, mapped to their parent instance.
    inst_promoted: BTreeMap<u64, u64>,
    inst_parent: BTreeMap<u64, u64>,
    decided: BTreeSet<TransactionId>,
}

impl WriterTracker {
    fn new(events: &[Event]) -> Result<Self, MalformedTrace> {
        let mut inst_parent = BTreeMap::new();
        for e in events.iter().filter(|e| e.kind == Kind::Register && !e.detail.has("rejected")) {
            if let (Some(i), Some(p)) = (e.inst(), e.detail.get_u64("parent")) {
                inst_parent.insert(i, p);
            }
        }
        Ok(WriterTracker {
            forest: TxnForest::from_events(events)?,
            homes: homes(events)?,
            stacks: BTreeMap::new(),
            promoted: BTreeMap::new(),
            inst_promoted: BTreeMap::new(),
            inst_parent,
            decided: BTreeSet::new(),
        })
    }

    fn root(&self, t: TransactionId) -> TransactionId {
        self.forest.root(t).unwrap_or(t)
    }

    fn effective(&self, mut t: TransactionId) -> TransactionId {
        while let Some(p) = self.promoted.get(&t) {
            t = *p;
        }
        t
    }

    fn effective_inst(&self, mut i: u64) -> u64 {
        while let Some(p) = self.inst_promoted.get(&i) {
            i = *p;
        }
        i
    }

    fn inst_is_ancestor_or_self(&self, a: u64, mut i: u64) -> bool {
        loop {
            if a == i {
                return true;
            }
            match self.inst_parent.get(&i) {
                Some(p) => i = *p,
                None => return false,
            }
        }
    }

    /// Writer of the value `obj` currently holds, if any.
    fn owner(&self, obj: &str) -> Option<(TransactionId, Option<u64>)> {
        self.stacks.get(obj).and_then(|s| s.last().copied())
    }

    /// Advances the model past `e`. Call after checking `e`.
    fn observe(&mut self, e: &Event) -> Result<(), MalformedTrace> {
        match e.kind {
            Kind::Write => {
                let obj = obj_of(e)?.to_owned();
                let t = txn_of(e)?;
                let s = self.stacks.entry(obj).or_default();
                if e.detail.has("undo") {
                    if let Some(i) = s.iter().rposition(|(w, _)| self.forest.is_ancestor_or_self(t, *w)) {
                        s.remove(i);
                    }
                } else {
                    s.push((t, e.inst()));
                }
            }
            Kind::Commit2 if e.detail.has("decide") => {
                self.decided.insert(txn_of(e)?);
            }
            Kind::Commit2 => {
                if let Some(p) = e.detail.get("nested") {
                    let p: TransactionId = p.parse().map_err(|_| malformed(e, "bad nested parent"))?;
                    self.promoted.insert(txn_of(e)?, p);
                }
            }
            Kind::Outcome if e.detail.get("result") == Some("committed") => {
                if let Some(i) = e.inst() {
                    if let Some(p) = self.inst_parent.get(&i) {
                        self.inst_promoted.insert(i, *p);
                    }
                }
            }
            Kind::Crash => {
                let node = e.detail.get("node").unwrap_or_default();
                for (obj, s) in self.stacks.iter_mut() {
                    if self.homes.get(obj).is_some_and(|h| h == node) {
                        s.clear();
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Reads by one top-level transaction of values written by another that had
/// not yet reached its commit decision.
pub fn smuggling_scan(events: &[Event]) -> Result<Vec<Violation>, MalformedTrace> {
    let mut w = WriterTracker::new(events)?;
    let mut out = Vec::new();
    for e in events {
        if e.kind == Kind::Read {
            let obj = obj_of(e)?;
            let reader = w.root(txn_of(e)?);
            if let Some((writer, _)) = w.owner(obj) {
                let wr = w.root(writer);
                if wr != reader && !w.decided.contains(&wr) {
                    out.push(at(e, format!("{reader} read `{obj}` written by undecided {wr}")));
                }
            }
        }
        w.observe(e)?;
    }
    Ok(out)
}

/// Reads and overwrites of a value whose writer is neither an ancestor of
/// the accessor nor committed into one; checked both between transactions
/// and between action instances.
pub fn strictness_scan(events: &[Event]) -> Result<Vec<Violation>, MalformedTrace> {
    let mut w = WriterTracker::new(events)?;
    let mut out = Vec::new();
    for e in events {
        if is_operation(e) {
            let obj = obj_of(e)?;
            let t = txn_of(e)?;
            if let Some((writer, winst)) = w.owner(obj) {
                let eff = w.effective(writer);
                if !w.decided.contains(&w.root(eff)) && !w.forest.is_ancestor_or_self(eff, t) {
                    out.push(at(e, format!("{t} accessed `{obj}` holding uncommitted data of {eff}")));
                } else if let (Some(wi), Some(ri)) = (winst, e.inst()) {
                    let effi = w.effective_inst(wi);
                    if w.root(writer) == w.root(t) && !w.inst_is_ancestor_or_self(effi, ri) {
                        out.push(at(e, format!("instance {ri} accessed `{obj}` holding uncommitted data of instance {effi}")));
                    }
                }
            }
        }
        w.observe(e)?;
    }
    Ok(out)
}

fn is_body_event(e: &Event) -> bool {
    matches!(e.kind, Kind::SyncEmit | Kind::SyncAwait | Kind::Step) || is_operation(e)
}

/// Role-body events of an instance lie strictly between its last
/// registration and its outcome; a participant's events in the enclosing
/// instance do not resume before the nested outcome.
pub fn bracketing_scan(events: &[Event]) -> Result<Vec<Violation>, MalformedTrace> {
    let mut last_reg: BTreeMap<u64, u64> = BTreeMap::new();
    let mut reg_of: BTreeMap<(u64, u64), u64> = BTreeMap::new();
    let mut parent: BTreeMap<u64, u64> = BTreeMap::new();
    let mut members: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
    let mut outcome: BTreeMap<u64, u64> = BTreeMap::new();
    for e in events {
        match e.kind {
            Kind::Register if !e.detail.has("rejected") => {
                let i = e.inst().ok_or_else(|| malformed(e, "register without instance"))?;
                let t = e.thread().ok_or_else(|| malformed(e, "register without thread"))?;
                last_reg.insert(i, e.seq);
                reg_of.insert((i, t), e.seq);
                members.entry(i).or_default().insert(t);
                if let Some(p) = e.detail.get_u64("parent") {
                    parent.insert(i, p);
                }
            }
            Kind::Outcome => {
                let i = e.inst().ok_or_else(|| malformed(e, "outcome without instance"))?;
                outcome.entry(i).or_insert(e.seq);
            }
            _ => {}
        }
    }
    let mut out = Vec::new();
    for e in events.iter().filter(|e| is_body_event(e)) {
        let (Some(i), Some(t)) = (e.inst(), e.thread()) else { continue };
        match last_reg.get(&i) {
            None => out.push(at(e, format!("event of unregistered instance {i}"))),
            Some(r) if e.seq < *r => out.push(at(e, format!("instance {i} event before its last registration"))),
            _ => {}
        }
        if !members.get(&i).is_some_and(|m| m.contains(&t)) {
            out.push(at(e, format!("thread {t} is not a participant of instance {i}")));
        }
        if outcome.get(&i).is_some_and(|o| e.seq > *o) {
            out.push(at(e, format!("instance {i} event after its outcome")));
        }
        // resuming the enclosing instance before a nested one decided
        for (c, p) in &parent {
            if *p != i {
                continue;
            }
            if let Some(r) = reg_of.get(&(*c, t)) {
                if e.seq > *r && outcome.get(c).is_none_or(|o| e.seq < *o) {
                    out.push(at(e, format!("thread {t} resumed instance {i} before nested instance {c} finished")));
                }
            }
        }
    }
    Ok(out)
}

/// All participants of an instance receive one outcome, the same one.
pub fn unanimity_scan(events: &[Event]) -> Result<Vec<Violation>, MalformedTrace> {
    let mut members: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
    let mut got: BTreeMap<u64, Vec<(&Event, u64, &str)>> = BTreeMap::new();
    for e in events {
        match e.kind {
            Kind::Register if !e.detail.has("rejected") => {
                let i = e.inst().ok_or_else(|| malformed(e, "register without instance"))?;
                members.entry(i).or_default().insert(e.thread().unwrap_or_default());
            }
            Kind::Outcome => {
                let i = e.inst().ok_or_else(|| malformed(e, "outcome without instance"))?;
                let t = e.thread().ok_or_else(|| malformed(e, "outcome without thread"))?;
                let r = e.detail.get("result").ok_or_else(|| malformed(e, "outcome without result"))?;
                got.entry(i).or_default().push((e, t, r));
            }
            _ => {}
        }
    }
    let mut out = Vec::new();
    for (i, list) in &got {
        let first = list[0];
        let mut seen = BTreeSet::new();
        for (e, t, r) in list {
            if *r != first.2 {
                out.push(at(e, format!("instance {i}: thread {t} got {r}, thread {} got {}", first.1, first.2)));
            }
            if !seen.insert(*t) {
                out.push(at(e, format!("instance {i}: thread {t} got two outcomes")));
            }
            if e.time != first.0.time {
                out.push(at(e, format!("instance {i}: outcomes delivered at different times")));
            }
        }
        if let Some(m) = members.get(i) {
            for t in m.difference(&seen) {
                out.push(Violation { seq: None, msg: format!("instance {i}: participant {t} got no outcome") });
            }
        }
    }
    Ok(out)
}

/// Replays object state from the trace. An aborted instance must find its
/// footprint exactly at the recovery line; a decided transaction installs
/// exactly what it prepared, everywhere that is up; an aborted one installs
/// nothing. The replayed stable state must equal the dump.
pub fn atomicity_scan(events: &[Event], dump: &[DumpEntry]) -> Result<Vec<Violation>, MalformedTrace> {
    let homes = homes(events)?;
    let forest = TxnForest::from_events(events)?;
    let mut down: BTreeSet<String> = BTreeSet::new();
    let mut stable: BTreeMap<String, (u64, String)> = BTreeMap::new();
    let mut volatile: BTreeMap<String, String> = BTreeMap::new();
    let mut lines: BTreeMap<u64, BTreeMap<String, String>> = BTreeMap::new();
    let mut aborted_done: BTreeSet<u64> = BTreeSet::new();
    let mut prepared: BTreeMap<(TransactionId, String), (u64, String)> = BTreeMap::new();
    let mut applied: BTreeSet<(TransactionId, String)> = BTreeSet::new();
    let mut decided: BTreeSet<TransactionId> = BTreeSet::new();
    let mut aborted_roots: BTreeSet<TransactionId> = BTreeSet::new();
    let mut top_committed: Vec<(&Event, TransactionId)> = Vec::new();
    let nested: BTreeSet<u64> = events
        .iter()
        .filter(|e| e.kind == Kind::Register && e.detail.has("parent") && !e.detail.has("rejected"))
        .filter_map(Event::inst)
        .collect();
    let mut out = Vec::new();
    let up = |down: &BTreeSet<String>, obj: &str| homes.get(obj).is_some_and(|h| !down.contains(h));
    for e in events {
        match e.kind {
            Kind::Create => {
                let obj = obj_of(e)?.to_owned();
                let val = e.detail.get("val").ok_or_else(|| malformed(e, "create without value"))?.to_owned();
                let ver = e.detail.get_u64("ver").unwrap_or(0);
                stable.insert(obj.clone(), (ver, val.clone()));
                volatile.insert(obj, val);
            }
            Kind::Write => {
                let obj = obj_of(e)?;
                let val = e.detail.get("val").ok_or_else(|| malformed(e, "write without value"))?;
                if up(&down, obj) {
                    volatile.insert(obj.to_owned(), val.to_owned());
                } else {
                    out.push(at(e, format!("write to `{obj}` while its node is down")));
                }
            }
            Kind::Crash => {
                let node = e.detail.get("node").ok_or_else(|| malformed(e, "crash without node"))?;
                down.insert(node.to_owned());
                for (obj, h) in &homes {
                    if h == node {
                        volatile.remove(obj);
                    }
                }
            }
            Kind::Recover => {
                let node = e.detail.get("node").ok_or_else(|| malformed(e, "recover without node"))?;
                down.remove(node);
                for (obj, h) in &homes {
                    if h == node {
                        if let Some((_, v)) = stable.get(obj) {
                            volatile.insert(obj.clone(), v.clone());
                        }
                    }
                }
            }
            Kind::LineRecovery => {
                let i = e.inst().ok_or_else(|| malformed(e, "recovery line without instance"))?;
                let mut snap = BTreeMap::new();
                for (k, v) in e.detail.iter() {
                    if let Some(obj) = k.strip_prefix("v.") {
                        snap.insert(obj.to_owned(), v.to_owned());
                    }
                }
                lines.insert(i, snap);
            }
            Kind::Outcome => {
                let i = e.inst().ok_or_else(|| malformed(e, "outcome without instance"))?;
                match e.detail.get("result") {
                    Some("aborted") if aborted_done.insert(i) => {
                        let tree_undone = nested.contains(&i)
                            && e.txn.and_then(|t| forest.root(t)).is_some_and(|r| aborted_roots.contains(&r));
                        if let Some(snap) = lines.get(&i).filter(|_| !tree_undone) {
                            for (obj, v) in snap {
                                if !up(&down, obj) {
                                    continue;
                                }
                                if volatile.get(obj) != Some(v) {
                                    out.push(at(e, format!("instance {i} aborted with `{obj}` off its recovery line")));
                                }
                                volatile.insert(obj.clone(), v.clone());
                            }
                        }
                    }
                    Some("committed") if !nested.contains(&i) => {
                        if let Some(t) = e.txn {
                            top_committed.push((e, t));
                        }
                    }
                    _ => {}
                }
            }
            Kind::Commit1 => {
                if let Some(obj) = &e.obj {
                    let ver = e.detail.get_u64("ver").ok_or_else(|| malformed(e, "prepare without version"))?;
                    let val = e.detail.get("val").ok_or_else(|| malformed(e, "prepare without value"))?;
                    prepared.insert((txn_of(e)?, obj.clone()), (ver, val.to_owned()));
                }
            }
            Kind::Commit2 => {
                let t = txn_of(e)?;
                if e.detail.has("decide") {
                    decided.insert(t);
                } else if let Some(obj) = &e.obj {
                    let ver = e.detail.get_u64("ver").ok_or_else(|| malformed(e, "apply without version"))?;
                    let val = e.detail.get("val").ok_or_else(|| malformed(e, "apply without value"))?;
                    if !decided.contains(&t) {
                        out.push(at(e, format!("{t} installed `{obj}` before its commit decision")));
                    }
                    if prepared.get(&(t, obj.clone())) != Some(&(ver, val.to_owned())) {
                        out.push(at(e, format!("{t} installed `{obj}` differently from what it prepared")));
                    }
                    stable.insert(obj.clone(), (ver, val.to_owned()));
                    volatile.insert(obj.clone(), val.to_owned());
                    applied.insert((t, obj.clone()));
                }
            }
            Kind::Abort if e.detail.get("node").is_none() => {
                let t = txn_of(e)?;
                if forest.parent(t).is_none() {
                    if decided.contains(&t) {
                        out.push(at(e, format!("{t} aborted after its commit decision")));
                    }
                    aborted_roots.insert(t);
                }
            }
            _ => {}
        }
    }
    for (e, t) in top_committed {
        if !decided.contains(&t) {
            out.push(at(e, format!("instance committed but {t} was never decided")));
        }
    }
    for (t, obj) in prepared.keys() {
        let pending_down = !up(&down, obj);
        if decided.contains(t) && !applied.contains(&(*t, obj.clone())) && !pending_down {
            out.push(Violation { seq: None, msg: format!("{t} decided but `{obj}` never installed") });
        }
        if aborted_roots.contains(t) && applied.contains(&(*t, obj.clone())) {
            out.push(Violation { seq: None, msg: format!("aborted {t} installed `{obj}`") });
        }
    }
    let mut replay: BTreeMap<&str, (u64, String)> = stable.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    for d in dump {
        match replay.remove(d.object.as_str()) {
            Some((ver, val)) if ver == d.version && val == d.value.to_hex() => {}
            Some((ver, val)) => out.push(Violation {
                seq: None,
                msg: format!("dump has `{}` at {}:{}, trace replays {ver}:{val}", d.object, d.version, d.value.to_hex()),
            }),
            None => out.push(Violation { seq: None, msg: format!("dump has `{}`, which the trace never created", d.object) }),
        }
    }
    if !dump.is_empty() {
        for obj in replay.keys() {
            out.push(Violation { seq: None, msg: format!("trace creates `{obj}`, which the dump lacks") });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{Detail, Trace};

    fn t(n: u64) -> Option<TransactionId> {
        Some(TransactionId(n))
    }

    fn base() -> Trace {
        let mut tr = Trace::new();
        tr.push(Kind::Create, None, Some("x"), Detail::new().with("node", "n1").with("val", "00").with("ver", 0));
        tr.push(Kind::Begin, t(1), None, Detail::new().with("node", "n1"));
        tr.push(Kind::Begin, t(2), None, Detail::new().with("node", "n1"));
        tr
    }

    #[test]
    fn read_of_undecided_write_is_smuggling() {
        let mut tr = base();
        tr.push(Kind::Write, t(1), Some("x"), Detail::new().with("val", "05"));
        tr.push(Kind::Read, t(2), Some("x"), Detail::new().with("val", "05"));
        assert_eq!(smuggling_scan(tr.events()).unwrap().len(), 1);
        assert_eq!(strictness_scan(tr.events()).unwrap().len(), 1);
    }

    #[test]
    fn read_after_decision_or_undo_is_clean() {
        let mut tr = base();
        tr.push(Kind::Write, t(1), Some("x"), Detail::new().with("val", "05"));
        tr.push(Kind::Commit2, t(1), None, Detail::new().flag("decide").with("node", "n1"));
        tr.push(Kind::Read, t(2), Some("x"), Detail::new().with("val", "05"));
        tr.push(Kind::Write, t(2), Some("x"), Detail::new().with("val", "06"));
        tr.push(Kind::Write, t(2), Some("x"), Detail::new().with("val", "05").flag("undo"));
        tr.push(Kind::Begin, t(3), None, Detail::new().with("node", "n1"));
        tr.push(Kind::Read, t(3), Some("x"), Detail::new().with("val", "05"));
        assert!(smuggling_scan(tr.events()).unwrap().is_empty());
    }

    #[test]
    fn nested_commit_hands_data_to_parent() {
        let mut tr = base();
        tr.push(Kind::Begin, t(3), None, Detail::new().with("parent", "T1"));
        tr.push(Kind::Write, t(3), Some("x"), Detail::new().with("val", "07"));
        tr.push(Kind::Commit2, t(3), None, Detail::new().with("nested", "T1"));
        tr.push(Kind::Read, t(1), Some("x"), Detail::new().with("val", "07"));
        assert!(strictness_scan(tr.events()).unwrap().is_empty());
        tr.push(Kind::Begin, t(4), None, Detail::new().with("parent", "T1"));
        tr.push(Kind::Begin, t(5), None, Detail::new().with("parent", "T4"));
        tr.push(Kind::Write, t(5), Some("x"), Detail::new().with("val", "08"));
        tr.push(Kind::Begin, t(6), None, Detail::new().with("parent", "T1"));
        tr.push(Kind::Read, t(6), Some("x"), Detail::new().with("val", "08"));
        assert_eq!(strictness_scan(tr.events()).unwrap().len(), 1);
        assert!(smuggling_scan(tr.events()).unwrap().is_empty());
    }

    fn reg(tr: &mut Trace, inst: u64, thr: u64) {
        tr.push(Kind::Register, None, None, Detail::new().with("inst", inst).with("thr", thr));
    }

    fn body(tr: &mut Trace, inst: u64, thr: u64) {
        tr.push(Kind::Read, t(1), Some("x"), Detail::new().with("val", "00").with("inst", inst).with("thr", thr).with("step", 0));
    }

    fn outcome(tr: &mut Trace, inst: u64, thr: u64, r: &str) {
        tr.push(Kind::Outcome, t(1), None, Detail::new().with("inst", inst).with("thr", thr).with("result", r));
    }

    #[test]
    fn bracketing_catches_early_and_late_events() {
        let mut tr = base();
        reg(&mut tr, 1, 1);
        body(&mut tr, 1, 1);
        reg(&mut tr, 1, 2);
        outcome(&mut tr, 1, 1, "committed");
        outcome(&mut tr, 1, 2, "committed");
        body(&mut tr, 1, 2);
        let v = bracketing_scan(tr.events()).unwrap();
        assert_eq!(v.len(), 2, "{v:?}");
    }

    #[test]
    fn split_outcome_breaks_unanimity() {
        let mut tr = base();
        reg(&mut tr, 1, 1);
        reg(&mut tr, 1, 2);
        reg(&mut tr, 1, 3);
        outcome(&mut tr, 1, 1, "committed");
        outcome(&mut tr, 1, 2, "aborted");
        let v = unanimity_scan(tr.events()).unwrap();
        assert_eq!(v.len(), 2, "{v:?}");
    }

    #[test]
    fn abort_off_recovery_line_is_flagged() {
        let mut tr = base();
        tr.push(Kind::LineRecovery, t(1), None, Detail::new().with("inst", 1).with("v.x", "00"));
        tr.push(Kind::Write, t(1), Some("x"), Detail::new().with("val", "05"));
        outcome(&mut tr, 1, 1, "aborted");
        assert_eq!(atomicity_scan(tr.events(), &[]).unwrap().len(), 1);
        let mut ok = base();
        ok.push(Kind::LineRecovery, t(1), None, Detail::new().with("inst", 1).with("v.x", "00"));
        ok.push(Kind::Write, t(1), Some("x"), Detail::new().with("val", "05"));
        ok.push(Kind::Write, t(1), Some("x"), Detail::new().with("val", "00").flag("undo"));
        outcome(&mut ok, 1, 1, "aborted");
        assert!(atomicity_scan(ok.events(), &[]).unwrap().is_empty());
    }

    #[test]
    fn install_must_match_prepare_and_dump() {
        let mut tr = base();
        tr.push(Kind::Commit1, t(1), Some("x"), Detail::new().with("node", "n1").with("ver", 1).with("val", "05"));
        tr.push(Kind::Commit2, t(1), None, Detail::new().flag("decide").with("node", "n1"));
        tr.push(Kind::Commit2, t(1), Some("x"), Detail::new().with("node", "n1").with("ver", 1).with("val", "06"));
        assert_eq!(atomicity_scan(tr.events(), &[]).unwrap().len(), 1);
        let dump = [crate::object_store::parse_dump_line("n1\tx\t0\t00").unwrap()];
        assert!(atomicity_scan(base().events(), &dump).unwrap().is_empty());
        let wrong = [crate::object_store::parse_dump_line("n1\tx\t3\t00").unwrap()];
        assert_eq!(atomicity_scan(base().events(), &wrong).unwrap().len(), 1);
    }
}
