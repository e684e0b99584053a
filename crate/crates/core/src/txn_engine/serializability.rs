//! Conflict-serializability audit over a finished trace.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::TransactionId;
use crate::trace::{Event, Kind};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("malformed trace at event {seq}: {msg}")]
pub struct MalformedTrace {
    pub seq: u64,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SerializabilityVerdict {
    /// A serial order of the committed top-level transactions.
    Serializable(Vec<TransactionId>),
    /// A cycle `t0 -> t1 -> ... -> t0`, listed without repeating `t0`.
    Cyclic(Vec<TransactionId>),
}

impl SerializabilityVerdict {
    pub fn is_serializable(&self) -> bool {
        matches!(self, SerializabilityVerdict::Serializable(_))
    }
}

/// Parent links and top-level roots recovered from `begin` events.
#[derive(Debug, Clone, Default)]
pub struct TxnForest {
    parent: BTreeMap<TransactionId, Option<TransactionId>>,
}

impl TxnForest {
    pub fn from_events(events: &[Event]) -> Result<Self, MalformedTrace> {
        let mut f = TxnForest::default();
        for e in events.iter().filter(|e| e.kind == Kind::Begin) {
            let t = e.txn.ok_or_else(|| bad(e, "begin without txn"))?;
            let parent = match e.detail.get("parent") {
                Some(p) => {
                    let p: TransactionId = p.parse().map_err(|_| bad(e, "bad parent"))?;
                    if !f.parent.contains_key(&p) {
                        return Err(bad(e, "parent begun after child"));
                    }
                    Some(p)
                }
                None => None,
            };
            if f.parent.insert(t, parent).is_some() {
                return Err(bad(e, "transaction begun twice"));
            }
        }
        Ok(f)
    }

    pub fn root(&self, t: TransactionId) -> Option<TransactionId> {
        let mut cur = t;
        loop {
            match self.parent.get(&cur)? {
                Some(p) => cur = *p,
                None => return Some(cur),
            }
        }
    }

    pub fn parent(&self, t: TransactionId) -> Option<TransactionId> {
        self.parent.get(&t).copied().flatten()
    }

    pub fn is_ancestor_or_self(&self, a: TransactionId, t: TransactionId) -> bool {
        let mut cur = Some(t);
        while let Some(c) = cur {
            if c == a {
                return true;
            }
            cur = self.parent(c);
        }
        false
    }

    pub fn contains(&self, t: TransactionId) -> bool {
        self.parent.contains_key(&t)
    }
}

fn bad(e: &Event, msg: &str) -> MalformedTrace {
    MalformedTrace { seq: e.seq, msg: msg.to_owned() }
}

/// True for read and write events that are transaction operations (undo
/// restorations are not).
pub fn is_operation(e: &Event) -> bool {
    matches!(e.kind, Kind::Read | Kind::Write) && !e.detail.has("undo")
}

pub fn committed_roots(events: &[Event]) -> BTreeSet<TransactionId> {
    events
        .iter()
        .filter(|e| e.kind == Kind::Commit2 && e.detail.has("decide"))
        .filter_map(|e| e.txn)
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConflictGraph {
    pub vertices: BTreeSet<TransactionId>,
    pub edges: BTreeSet<(TransactionId, TransactionId)>,
}

impl ConflictGraph {
    pub fn from_events(events: &[Event]) -> Result<Self, MalformedTrace> {
        let forest = TxnForest::from_events(events)?;
        let committed = committed_roots(events);
        let mut per_obj: BTreeMap<&str, Vec<(TransactionId, bool)>> = BTreeMap::new();
        for e in events.iter().filter(|e| is_operation(e)) {
            let t = e.txn.ok_or_else(|| bad(e, "operation without txn"))?;
            let obj = e.obj.as_deref().ok_or_else(|| bad(e, "operation without object"))?;
            let root = forest.root(t).ok_or_else(|| bad(e, "operation by unknown txn"))?;
            if committed.contains(&root) {
                per_obj.entry(obj).or_default().push((root, e.kind == Kind::Write));
            }
        }
        let mut g = ConflictGraph { vertices: committed, edges: BTreeSet::new() };
        for ops in per_obj.values() {
            for (i, (ti, wi)) in ops.iter().enumerate() {
                for (tj, wj) in &ops[i + 1..] {
                    if ti != tj && (*wi || *wj) {
                        g.edges.insert((*ti, *tj));
                    }
                }
            }
        }
        Ok(g)
    }

    fn successors(&self, t: TransactionId) -> impl Iterator<Item = TransactionId> + '_ {
        self.edges.range((t, TransactionId(0))..=(t, TransactionId(u64::MAX))).map(|(_, b)| *b)
    }

    /// Kahn's algorithm, smallest ordinal first; on failure, a concrete cycle.
    pub fn verdict(&self) -> SerializabilityVerdict {
        let mut indeg: BTreeMap<TransactionId, usize> = self.vertices.iter().map(|v| (*v, 0)).collect();
        for (_, b) in &self.edges {
            *indeg.entry(*b).or_default() += 1;
        }
        let mut ready: BTreeSet<TransactionId> = indeg.iter().filter(|(_, d)| **d == 0).map(|(v, _)| *v).collect();
        let mut order = Vec::new();
        while let Some(v) = ready.pop_first() {
            order.push(v);
            for s in self.successors(v) {
                let d = indeg.get_mut(&s).expect("vertex");
                *d -= 1;
                if *d == 0 {
                    ready.insert(s);
                }
            }
        }
        if order.len() == indeg.len() {
            return SerializabilityVerdict::Serializable(order);
        }
        let remaining: BTreeSet<TransactionId> = indeg.iter().filter(|(_, d)| **d > 0).map(|(v, _)| *v).collect();
        SerializabilityVerdict::Cyclic(self.find_cycle(&remaining))
    }

    fn find_cycle(&self, within: &BTreeSet<TransactionId>) -> Vec<TransactionId> {
        // some left-over vertices only sit downstream of a cycle
        let on_cycle = |v: &TransactionId| self.successors(*v).any(|s| within.contains(&s) && self.reaches(s, *v, within));
        let start = *within.iter().find(|v| on_cycle(v)).expect("remainder holds a cycle");
        let mut path = vec![start];
        let mut pos: BTreeMap<TransactionId, usize> = BTreeMap::from([(start, 0)]);
        let mut cur = start;
        loop {
            let next = self
                .successors(cur)
                .find(|s| within.contains(s) && self.reaches(*s, cur, within))
                .expect("start lies on a cycle");
            if let Some(&i) = pos.get(&next) {
                return path[i..].to_vec();
            }
            pos.insert(next, path.len());
            path.push(next);
            cur = next;
        }
    }

    fn reaches(&self, from: TransactionId, to: TransactionId, within: &BTreeSet<TransactionId>) -> bool {
        let mut seen = BTreeSet::new();
        let mut stack = vec![from];
        while let Some(v) = stack.pop() {
            if v == to {
                return true;
            }
            if seen.insert(v) {
                stack.extend(self.successors(v).filter(|s| within.contains(s)));
            }
        }
        false
    }
}

pub fn audit_serializability(events: &[Event]) -> Result<SerializabilityVerdict, MalformedTrace> {
    Ok(ConflictGraph::from_events(events)?.verdict())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{Detail, Trace};

    fn t(n: u64) -> TransactionId {
        TransactionId(n)
    }

    fn op(tr: &mut Trace, kind: Kind, txn: u64, obj: &str) {
        tr.push(kind, Some(t(txn)), Some(obj), Detail::new().with("val", "30"));
    }

    fn begin(tr: &mut Trace, txn: u64) {
        tr.push(Kind::Begin, Some(t(txn)), None, Detail::new());
    }

    fn decide(tr: &mut Trace, txn: u64) {
        tr.push(Kind::Commit2, Some(t(txn)), None, Detail::new().flag("decide"));
    }

    #[test]
    fn cycle_found_when_smallest_vertex_is_only_downstream() {
        // T2 -> T1, and T2 <-> T3
        let mut tr = Trace::new();
        for n in 1..=3 {
            begin(&mut tr, n);
        }
        op(&mut tr, Kind::Write, 2, "x");
        op(&mut tr, Kind::Read, 1, "x");
        op(&mut tr, Kind::Write, 2, "y");
        op(&mut tr, Kind::Read, 3, "y");
        op(&mut tr, Kind::Write, 3, "z");
        op(&mut tr, Kind::Read, 2, "z");
        for n in 1..=3 {
            decide(&mut tr, n);
        }
        assert_eq!(audit_serializability(tr.events()).unwrap(), SerializabilityVerdict::Cyclic(vec![t(2), t(3)]));
    }

    #[test]
    fn sequential_pair_is_serializable_in_commit_order() {
        let mut tr = Trace::new();
        begin(&mut tr, 1);
        op(&mut tr, Kind::Write, 1, "x");
        decide(&mut tr, 1);
        begin(&mut tr, 2);
        op(&mut tr, Kind::Read, 2, "x");
        decide(&mut tr, 2);
        assert_eq!(audit_serializability(tr.events()).unwrap(), SerializabilityVerdict::Serializable(vec![t(1), t(2)]));
    }

    #[test]
    fn read_write_cycle_reported() {
        let mut tr = Trace::new();
        begin(&mut tr, 1);
        begin(&mut tr, 2);
        op(&mut tr, Kind::Read, 1, "x");
        op(&mut tr, Kind::Read, 2, "y");
        op(&mut tr, Kind::Write, 2, "x");
        op(&mut tr, Kind::Write, 1, "y");
        decide(&mut tr, 1);
        decide(&mut tr, 2);
        match audit_serializability(tr.events()).unwrap() {
            SerializabilityVerdict::Cyclic(c) => {
                assert_eq!(c.len(), 2);
                assert!(c.contains(&t(1)) && c.contains(&t(2)));
            }
            v => panic!("expected cycle, got {v:?}"),
        }
    }

    #[test]
    fn nested_operations_count_for_their_root_and_aborted_roots_are_ignored() {
        let mut tr = Trace::new();
        begin(&mut tr, 1);
        tr.push(Kind::Begin, Some(t(2)), None, Detail::new().with("parent", "T1"));
        begin(&mut tr, 3);
        op(&mut tr, Kind::Read, 3, "x");
        op(&mut tr, Kind::Write, 2, "x");
        op(&mut tr, Kind::Write, 3, "x");
        decide(&mut tr, 1);
        let g = ConflictGraph::from_events(tr.events()).unwrap();
        assert_eq!(g.vertices, BTreeSet::from([t(1)]));
        assert!(g.edges.is_empty());
    }

    #[test]
    fn unknown_txn_is_malformed() {
        let mut tr = Trace::new();
        op(&mut tr, Kind::Read, 9, "x");
        decide(&mut tr, 9);
        assert!(audit_serializability(tr.events()).is_err());
    }
}
