//! Partial order of the operations an instance's participants invoked.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

use crate::object_store::Value;
use crate::trace::{Event, Kind};
use crate::txn_engine::serializability::is_operation;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MappingError {
    #[error("ordering constraints and synchronization form a cycle")]
    CyclicConstraint,
    #[error("operation on `{0}` blocked while executing the plan")]
    Blocked(String),
    #[error(transparent)]
    Txn(#[from] crate::txn_engine::TxnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    Read,
    Write,
    /// A nested instance collapsed to a single node.
    Nested,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OpKind::Read => "read",
            OpKind::Write => "write",
            OpKind::Nested => "nested",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpNode {
    pub thread: u64,
    pub step: u64,
    pub kind: OpKind,
    pub obj: Option<String>,
    /// Value written, for write nodes.
    pub value: Option<Value>,
    /// Instance that executed the node (the nested instance for boundaries).
    pub region: u64,
    /// Top-level nested region this node was expanded from, if any.
    pub block: Option<u64>,
    /// Trace position of the operation, when built from a trace.
    pub seq: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeKind {
    Prog,
    Sync,
    Constraint,
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeKind::Prog => "prog",
            EdgeKind::Sync => "sync",
            EdgeKind::Constraint => "constraint",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OperationDAG {
    pub region: u64,
    pub nodes: Vec<OpNode>,
    pub edges: BTreeSet<(usize, usize, EdgeKind)>,
}

/// What one instance did, in trace order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecordEntry {
    Op { thread: u64, step: u64, kind: OpKind, obj: String, value: Option<Value>, seq: u64 },
    Emit { thread: u64, step: u64, signal: String },
    Await { thread: u64, step: u64, signal: String },
    /// One participant entering nested instance `inst` at its step `step`.
    Enter { thread: u64, step: u64, inst: u64, action: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExecutionRecord {
    pub inst: u64,
    pub entries: Vec<RecordEntry>,
}

impl ExecutionRecord {
    /// Extracts the record of `inst` from a trace. Undo restorations and
    /// rejected registrations are not part of it.
    pub fn from_trace(events: &[Event], inst: u64) -> Self {
        let mut entries = Vec::new();
        for e in events {
            let (Some(thread), Some(step)) = (e.thread(), e.detail.get_u64("step")) else { continue };
            match e.kind {
                _ if is_operation(e) && e.inst() == Some(inst) => {
                    let kind = if e.kind == Kind::Read { OpKind::Read } else { OpKind::Write };
                    let value = if kind == OpKind::Write { e.detail.get("val").and_then(Value::from_hex) } else { None };
                    let obj = e.obj.clone().unwrap_or_default();
                    entries.push(RecordEntry::Op { thread, step, kind, obj, value, seq: e.seq });
                }
                Kind::SyncEmit | Kind::SyncAwait if e.inst() == Some(inst) => {
                    let signal = e.detail.get("sig").unwrap_or_default().to_owned();
                    entries.push(if e.kind == Kind::SyncEmit {
                        RecordEntry::Emit { thread, step, signal }
                    } else {
                        RecordEntry::Await { thread, step, signal }
                    });
                }
                Kind::Register if e.detail.get_u64("parent") == Some(inst) && !e.detail.has("rejected") => {
                    if let Some(child) = e.inst() {
                        let action = e.detail.get("action").unwrap_or_default().to_owned();
                        entries.push(RecordEntry::Enter { thread, step, inst: child, action });
                    }
                }
                _ => {}
            }
        }
        ExecutionRecord { inst, entries }
    }
}

impl OperationDAG {
    /// Builds the DAG of one instance. `order` holds the instance's ordering
    /// constraints between nested action names.
    pub fn build(record: &ExecutionRecord, order: &[(String, String)]) -> Result<Self, MappingError> {
        let mut dag = OperationDAG { region: record.inst, ..Default::default() };
        let mut boundary: BTreeMap<u64, usize> = BTreeMap::new();
        let mut boundary_action: BTreeMap<u64, String> = BTreeMap::new();
        // (thread, step) -> node, for program order
        let mut by_thread: BTreeMap<u64, BTreeMap<u64, usize>> = BTreeMap::new();
        for ent in &record.entries {
            match ent {
                RecordEntry::Op { thread, step, kind, obj, value, seq } => {
                    let id = dag.nodes.len();
                    dag.nodes.push(OpNode {
                        thread: *thread,
                        step: *step,
                        kind: *kind,
                        obj: Some(obj.clone()),
                        value: value.clone(),
                        region: record.inst,
                        block: None,
                        seq: Some(*seq),
                    });
                    by_thread.entry(*thread).or_default().insert(*step, id);
                }
                RecordEntry::Enter { thread, step, inst, action } => {
                    let id = *boundary.entry(*inst).or_insert_with(|| {
                        dag.nodes.push(OpNode {
                            thread: *thread,
                            step: *step,
                            kind: OpKind::Nested,
                            obj: None,
                            value: None,
                            region: *inst,
                            block: None,
                            seq: None,
                        });
                        dag.nodes.len() - 1
                    });
                    let n = &mut dag.nodes[id];
                    if (*thread, *step) < (n.thread, n.step) {
                        n.thread = *thread;
                        n.step = *step;
                    }
                    boundary_action.insert(*inst, action.clone());
                    by_thread.entry(*thread).or_default().insert(*step, id);
                }
                RecordEntry::Emit { .. } | RecordEntry::Await { .. } => {}
            }
        }
        for steps in by_thread.values() {
            let ids: Vec<usize> = steps.values().copied().collect();
            for w in ids.windows(2) {
                dag.edges.insert((w[0], w[1], EdgeKind::Prog));
            }
        }
        let emits: BTreeMap<&str, (u64, u64)> = record
            .entries
            .iter()
            .filter_map(|e| match e {
                RecordEntry::Emit { thread, step, signal } => Some((signal.as_str(), (*thread, *step))),
                _ => None,
            })
            .collect();
        for ent in &record.entries {
            let RecordEntry::Await { thread, step, signal } = ent else { continue };
            let Some(&(et, es)) = emits.get(signal.as_str()) else { continue };
            if et == *thread {
                continue;
            }
            let from = by_thread.get(&et).and_then(|m| m.range(..es).next_back()).map(|(_, id)| *id);
            let to = by_thread.get(thread).and_then(|m| m.range(step + 1..).next()).map(|(_, id)| *id);
            if let (Some(f), Some(t)) = (from, to) {
                dag.edges.insert((f, t, EdgeKind::Sync));
            }
        }
        for (a, b) in order {
            for (ia, _) in boundary_action.iter().filter(|(_, n)| *n == a) {
                for (ib, _) in boundary_action.iter().filter(|(_, n)| *n == b) {
                    dag.edges.insert((boundary[ia], boundary[ib], EdgeKind::Constraint));
                }
            }
        }
        if dag.topo_order().is_none() {
            return Err(MappingError::CyclicConstraint);
        }
        Ok(dag)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn preds(&self, n: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |(_, b, _)| *b == n).map(|(a, _, _)| *a)
    }

    pub fn succs(&self, n: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |(a, _, _)| *a == n).map(|(_, b, _)| *b)
    }

    fn key(&self, n: usize) -> (u64, u64, usize) {
        (self.nodes[n].thread, self.nodes[n].step, n)
    }

    /// Kahn's algorithm with the lowest (thread, step) ready node first.
    pub fn topo_order(&self) -> Option<Vec<usize>> {
        let mut indeg = vec![0usize; self.nodes.len()];
        for (_, b, _) in &self.edges {
            indeg[*b] += 1;
        }
        let mut ready: BTreeSet<(u64, u64, usize)> =
            (0..self.nodes.len()).filter(|n| indeg[*n] == 0).map(|n| self.key(n)).collect();
        let mut out = Vec::with_capacity(self.nodes.len());
        while let Some((_, _, n)) = ready.pop_first() {
            out.push(n);
            for s in self.succs(n) {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    ready.insert(self.key(s));
                }
            }
        }
        (out.len() == self.nodes.len()).then_some(out)
    }

    pub fn is_topological(&self, order: &[usize]) -> bool {
        if order.len() != self.nodes.len() {
            return false;
        }
        let mut pos = vec![usize::MAX; self.nodes.len()];
        for (i, n) in order.iter().enumerate() {
            if *n >= pos.len() || pos[*n] != usize::MAX {
                return false;
            }
            pos[*n] = i;
        }
        self.edges.iter().all(|(a, b, _)| pos[*a] < pos[*b])
    }

    /// True when `v` is reachable from `u`.
    pub fn reaches(&self, u: usize, v: usize) -> bool {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![u];
        while let Some(n) = stack.pop() {
            if n == v {
                return true;
            }
            if !std::mem::replace(&mut seen[n], true) {
                stack.extend(self.succs(n));
            }
        }
        false
    }

    /// Replaces each boundary node with the DAG of its nested instance.
    /// Edges into a boundary go to the child's sources, edges out leave from
    /// its sinks. Expanded nodes remember which boundary they came from.
    pub fn expand(&self, children: &BTreeMap<u64, OperationDAG>) -> OperationDAG {
        let mut out = OperationDAG { region: self.region, ..Default::default() };
        // per original node: (entry ids, exit ids) in the expanded graph
        let mut ends: Vec<(Vec<usize>, Vec<usize>)> = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            match children.get(&n.region).filter(|_| n.kind == OpKind::Nested) {
                Some(child) => {
                    let base = out.nodes.len();
                    for cn in &child.nodes {
                        let mut cn = cn.clone();
                        cn.block = Some(n.region);
                        out.nodes.push(cn);
                    }
                    for (a, b, k) in &child.edges {
                        out.edges.insert((base + a, base + b, *k));
                    }
                    let sources = (0..child.len()).filter(|i| child.preds(*i).next().is_none()).map(|i| base + i).collect();
                    let sinks = (0..child.len()).filter(|i| child.succs(*i).next().is_none()).map(|i| base + i).collect();
                    ends.push((sources, sinks));
                }
                None => {
                    out.nodes.push(n.clone());
                    let id = out.nodes.len() - 1;
                    ends.push((vec![id], vec![id]));
                }
            }
        }
        for (a, b, k) in &self.edges {
            for x in &ends[*a].1 {
                for y in &ends[*b].0 {
                    out.edges.insert((*x, *y, *k));
                }
            }
        }
        out
    }

    /// Text dump: node lines, then edge lines.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            s.push_str(&format!("{i}\t{}\t{}\t{}\t{}\n", n.thread, n.step, n.kind, n.obj.as_deref().unwrap_or("-")));
        }
        for (a, b, k) in &self.edges {
            s.push_str(&format!("edge\t{a}\t{b}\t{k}\n"));
        }
        s
    }
}

/// Deterministic sequence for running the whole DAG inside one transaction.
pub fn flatten(dag: &OperationDAG) -> Result<Vec<usize>, MappingError> {
    dag.topo_order().ok_or(MappingError::CyclicConstraint)
}

/// Counts the distinct legal execution sequences of an expanded DAG.
/// Under `contiguous_blocks` each expanded nested region must run without
/// interruption, which is what a flat transaction admits.
pub fn count_interleavings(dag: &OperationDAG, contiguous_blocks: bool) -> u64 {
    assert!(dag.len() <= 63, "exhaustive count is for small DAGs");
    let preds: Vec<u64> = (0..dag.len()).map(|n| dag.preds(n).fold(0u64, |m, p| m | (1 << p))).collect();
    let block_mask: HashMap<u64, u64> = dag.nodes.iter().enumerate().fold(HashMap::new(), |mut m, (i, n)| {
        if let Some(b) = n.block {
            *m.entry(b).or_default() |= 1 << i;
        }
        m
    });
    let full = if dag.is_empty() { 0 } else { u64::MAX >> (64 - dag.len()) };
    let mut memo: HashMap<(u64, Option<u64>), u64> = HashMap::new();
    count_rec(dag, &preds, &block_mask, contiguous_blocks, full, 0, None, &mut memo)
}

#[allow(clippy::too_many_arguments)]
fn count_rec(
    dag: &OperationDAG,
    preds: &[u64],
    block_mask: &HashMap<u64, u64>,
    contiguous: bool,
    full: u64,
    done: u64,
    open: Option<u64>,
    memo: &mut HashMap<(u64, Option<u64>), u64>,
) -> u64 {
    if done == full {
        return 1;
    }
    if let Some(v) = memo.get(&(done, open)) {
        return *v;
    }
    let mut total = 0;
    for n in 0..dag.len() {
        if done & (1 << n) != 0 || preds[n] & !done != 0 {
            continue;
        }
        let b = dag.nodes[n].block;
        if contiguous && open.is_some() && b != open {
            continue;
        }
        let now = done | (1 << n);
        let next_open = b.filter(|b| contiguous && block_mask[b] & !now != 0);
        total += count_rec(dag, preds, block_mask, contiguous, full, now, next_open, memo);
    }
    memo.insert((done, open), total);
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn op(thread: u64, step: u64, obj: &str, seq: u64) -> RecordEntry {
        RecordEntry::Op { thread, step, kind: OpKind::Read, obj: obj.into(), value: None, seq }
    }

    #[test]
    fn single_thread_chain() {
        let rec = ExecutionRecord { inst: 1, entries: vec![op(1, 0, "x", 0), op(1, 1, "y", 1), op(1, 2, "x", 2)] };
        let dag = OperationDAG::build(&rec, &[]).unwrap();
        assert_eq!(dag.len(), 3);
        assert_eq!(dag.edges.len(), 2);
        assert_eq!(flatten(&dag).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn disconnected_chains_flatten_by_thread_then_step() {
        let rec = ExecutionRecord {
            inst: 1,
            entries: vec![op(2, 0, "y", 0), op(1, 0, "x", 1), op(2, 1, "y", 2), op(1, 1, "x", 3)],
        };
        let dag = OperationDAG::build(&rec, &[]).unwrap();
        let seq: Vec<(u64, u64)> = flatten(&dag).unwrap().iter().map(|n| (dag.nodes[*n].thread, dag.nodes[*n].step)).collect();
        assert_eq!(seq, vec![(1, 0), (1, 1), (2, 0), (2, 1)]);
    }

    #[test]
    fn one_signal_gives_one_cross_edge() {
        let rec = ExecutionRecord {
            inst: 1,
            entries: vec![
                op(1, 0, "x", 0),
                RecordEntry::Emit { thread: 1, step: 1, signal: "s".into() },
                op(1, 2, "x", 2),
                RecordEntry::Await { thread: 2, step: 0, signal: "s".into() },
                op(2, 1, "y", 4),
                op(2, 2, "y", 5),
            ],
        };
        let dag = OperationDAG::build(&rec, &[]).unwrap();
        assert_eq!(dag.len(), 4);
        assert_eq!(dag.edges.len(), (4 - 2) + 1);
        let sync: Vec<_> = dag.edges.iter().filter(|e| e.2 == EdgeKind::Sync).collect();
        assert_eq!(sync, vec![&(0, 2, EdgeKind::Sync)]);
    }

    #[test]
    fn constraint_cycle_rejected() {
        let rec = ExecutionRecord {
            inst: 1,
            entries: vec![
                RecordEntry::Enter { thread: 1, step: 0, inst: 2, action: "A".into() },
                RecordEntry::Enter { thread: 1, step: 1, inst: 3, action: "B".into() },
            ],
        };
        let ok = OperationDAG::build(&rec, &[("A".into(), "B".into())]).unwrap();
        assert!(ok.edges.contains(&(0, 1, EdgeKind::Constraint)));
        assert_eq!(OperationDAG::build(&rec, &[("B".into(), "A".into())]), Err(MappingError::CyclicConstraint));
    }

    #[test]
    fn shared_boundary_node_for_multi_participant_nested() {
        let rec = ExecutionRecord {
            inst: 1,
            entries: vec![
                op(1, 0, "x", 0),
                RecordEntry::Enter { thread: 1, step: 1, inst: 2, action: "N".into() },
                RecordEntry::Enter { thread: 2, step: 0, inst: 2, action: "N".into() },
                op(2, 1, "y", 3),
            ],
        };
        let dag = OperationDAG::build(&rec, &[]).unwrap();
        assert_eq!(dag.nodes.iter().filter(|n| n.kind == OpKind::Nested).count(), 1);
        assert!(dag.reaches(0, 2));
    }

    #[test]
    fn interleaving_counts() {
        // two independent two-op regions under one parent
        let parent = ExecutionRecord {
            inst: 1,
            entries: vec![
                RecordEntry::Enter { thread: 1, step: 0, inst: 2, action: "A".into() },
                RecordEntry::Enter { thread: 2, step: 0, inst: 3, action: "B".into() },
            ],
        };
        let a = ExecutionRecord { inst: 2, entries: vec![op(1, 0, "x", 0), op(1, 1, "x", 1)] };
        let b = ExecutionRecord { inst: 3, entries: vec![op(2, 0, "y", 2), op(2, 1, "y", 3)] };
        let kids = BTreeMap::from([
            (2, OperationDAG::build(&a, &[]).unwrap()),
            (3, OperationDAG::build(&b, &[]).unwrap()),
        ]);
        let full = OperationDAG::build(&parent, &[]).unwrap().expand(&kids);
        assert_eq!(full.len(), 4);
        assert_eq!(count_interleavings(&full, false), 6);
        assert_eq!(count_interleavings(&full, true), 2);
    }
}
