//! Binding of action instances to transactions, and offline execution of a
//! DAG under either strategy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use super::dag::{MappingError, OpKind, OperationDAG};
use crate::ca_action::{CAActionDef, InstanceId};
use crate::object_store::{NodeId, ObjectStore};
use crate::trace::Trace;
use crate::txn_engine::{Access, TransactionId, TxnEngine, TxnError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// One transaction for the whole instance tree.
    Flatten,
    /// One child transaction per nested instance.
    Nested,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Flatten => "flatten",
            Strategy::Nested => "nested",
        })
    }
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "flatten" => Ok(Strategy::Flatten),
            "nested" => Ok(Strategy::Nested),
            _ => Err(format!("unknown strategy `{s}` (expected flatten or nested)")),
        }
    }
}

/// The configured strategy wins; otherwise nested when the action has nested
/// actions and flatten when it has none.
pub fn strategy_select(def: &CAActionDef, config: Option<Strategy>) -> Strategy {
    config.unwrap_or(if def.nested.is_empty() { Strategy::Flatten } else { Strategy::Nested })
}

/// Transactions bound to the instances of one top-level instance tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingPlan {
    pub strategy: Strategy,
    pub binding: BTreeMap<InstanceId, TransactionId>,
    root: Option<InstanceId>,
}

impl MappingPlan {
    pub fn new(strategy: Strategy) -> Self {
        MappingPlan { strategy, binding: BTreeMap::new(), root: None }
    }

    pub fn bind_top(
        &mut self,
        engine: &mut TxnEngine,
        trace: &mut Trace,
        inst: InstanceId,
        coordinator: NodeId,
    ) -> Result<TransactionId, TxnError> {
        let t = engine.begin_on(trace, None, coordinator)?;
        self.binding.insert(inst, t);
        self.root = Some(inst);
        Ok(t)
    }

    /// Under flatten the nested instance shares its parent's transaction.
    pub fn bind_nested(
        &mut self,
        engine: &mut TxnEngine,
        trace: &mut Trace,
        inst: InstanceId,
        parent: InstanceId,
    ) -> Result<TransactionId, TxnError> {
        let pt = *self.binding.get(&parent).expect("parent bound before child");
        let t = match self.strategy {
            Strategy::Flatten => pt,
            Strategy::Nested => engine.begin(trace, Some(pt))?,
        };
        self.binding.insert(inst, t);
        Ok(t)
    }

    pub fn txn_of(&self, inst: InstanceId) -> Option<TransactionId> {
        self.binding.get(&inst).copied()
    }

    /// The shared transaction of a flattened tree.
    pub fn flat_root(&self) -> Option<TransactionId> {
        match self.strategy {
            Strategy::Flatten => self.root.and_then(|r| self.txn_of(r)),
            Strategy::Nested => None,
        }
    }
}

/// One step of an offline execution plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanItem {
    Begin { region: u64, parent: Option<u64> },
    Op(usize),
    Commit { region: u64 },
}

/// Regions of the instance tree: `(region, parent region)`.
pub type RegionTree = BTreeMap<u64, Option<u64>>;

fn region_path(tree: &RegionTree, mut r: u64) -> Vec<u64> {
    let mut path = vec![r];
    while let Some(Some(p)) = tree.get(&r) {
        path.push(*p);
        r = *p;
    }
    path.reverse();
    path
}

/// Nested translation of an expanded DAG: each region becomes a transaction
/// begun right before its first operation and committed right after its
/// last (and after its children). Ready operations of different regions are
/// taken round-robin so unrelated regions interleave.
pub fn to_nested(dag: &OperationDAG, tree: &RegionTree) -> Result<Vec<PlanItem>, MappingError> {
    let mut indeg = vec![0usize; dag.len()];
    for (_, b, _) in &dag.edges {
        indeg[*b] += 1;
    }
    let mut remaining: BTreeMap<u64, usize> = BTreeMap::new();
    for n in &dag.nodes {
        for r in region_path(tree, n.region) {
            *remaining.entry(r).or_default() += 1;
        }
    }
    let mut open: Vec<u64> = Vec::new();
    let mut plan = Vec::new();
    let mut last_region: Option<u64> = None;
    let mut done = 0;
    while done < dag.len() {
        let ready: Vec<usize> = (0..dag.len()).filter(|n| indeg[*n] == 0).collect();
        if ready.is_empty() {
            return Err(MappingError::CyclicConstraint);
        }
        // prefer a different region than the previous pick
        let pick = ready
            .iter()
            .copied()
            .min_by_key(|n| {
                let nd = &dag.nodes[*n];
                (Some(nd.region) == last_region, nd.region, nd.thread, nd.step)
            })
            .expect("non-empty");
        let region = dag.nodes[pick].region;
        for r in region_path(tree, region) {
            if !open.contains(&r) {
                plan.push(PlanItem::Begin { region: r, parent: tree.get(&r).copied().flatten() });
                open.push(r);
            }
        }
        plan.push(PlanItem::Op(pick));
        indeg[pick] = usize::MAX;
        for s in dag.succs(pick) {
            indeg[s] -= 1;
        }
        done += 1;
        last_region = Some(region);
        for r in region_path(tree, region).into_iter().rev() {
            let left = remaining.get_mut(&r).expect("region counted");
            *left -= 1;
            if *left == 0 && tree.get(&r).copied().flatten().is_some() {
                plan.push(PlanItem::Commit { region: r });
            }
        }
    }
    for r in open.iter().filter(|r| tree.get(r).copied().flatten().is_none()) {
        plan.push(PlanItem::Commit { region: *r });
    }
    Ok(plan)
}

/// Plan that runs `order` inside one top-level transaction.
pub fn flat_plan(order: &[usize], root: u64) -> Vec<PlanItem> {
    let mut plan = vec![PlanItem::Begin { region: root, parent: None }];
    plan.extend(order.iter().map(|n| PlanItem::Op(*n)));
    plan.push(PlanItem::Commit { region: root });
    plan
}

/// Runs a plan against a store. Writes use the recorded values; any lock
/// wait is an error, since a plan is a single sequence.
pub fn execute(
    plan: &[PlanItem],
    dag: &OperationDAG,
    store: &mut ObjectStore,
    engine: &mut TxnEngine,
    trace: &mut Trace,
) -> Result<BTreeMap<u64, TransactionId>, MappingError> {
    let mut txns: BTreeMap<u64, TransactionId> = BTreeMap::new();
    let region_txn = |txns: &BTreeMap<u64, TransactionId>, r: u64| -> TransactionId {
        // an op of a region without its own transaction runs in the nearest bound ancestor
        *txns.get(&r).or_else(|| txns.values().next_back()).expect("some transaction begun")
    };
    let mut committed = BTreeSet::new();
    for item in plan {
        match *item {
            PlanItem::Begin { region, parent } => {
                let pt = parent.map(|p| txns[&p]);
                let t = engine.begin(trace, pt)?;
                txns.insert(region, t);
            }
            PlanItem::Op(n) => {
                let node = &dag.nodes[n];
                let txn = region_txn(&txns, node.region);
                let obj = node.obj.as_deref().unwrap_or_default();
                let r = match node.kind {
                    OpKind::Read => engine.read(store, trace, txn, obj, 0)?.eq(&Access::Queued),
                    OpKind::Write => {
                        let v = node.value.clone().unwrap_or_default();
                        engine.write(store, trace, txn, obj, v, 0)? == Access::Queued
                    }
                    OpKind::Nested => false,
                };
                if r {
                    return Err(MappingError::Blocked(obj.to_owned()));
                }
            }
            PlanItem::Commit { region } => {
                engine.commit(store, trace, txns[&region])?;
                committed.insert(region);
            }
        }
    }
    Ok(txns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapping::dag::{flatten, ExecutionRecord, RecordEntry};
    use crate::object_store::{ObjectId, Value};

    fn w(thread: u64, step: u64, obj: &str, v: i64) -> RecordEntry {
        RecordEntry::Op { thread, step, kind: OpKind::Write, obj: obj.into(), value: Some(Value::from_int(v)), seq: 0 }
    }

    fn store() -> ObjectStore {
        let mut s = ObjectStore::new();
        s.add_node("n1");
        for o in ["x", "y", "z"] {
            s.create_object(ObjectId::new(o, "n1"), Value::from_int(0)).unwrap();
        }
        s
    }

    fn engine() -> TxnEngine {
        let mut e = TxnEngine::new();
        e.set_default_node(NodeId::new("n1"));
        e
    }

    fn two_siblings(order: &[(String, String)]) -> (OperationDAG, RegionTree) {
        let parent = ExecutionRecord {
            inst: 1,
            entries: vec![
                w(1, 0, "z", 9),
                RecordEntry::Enter { thread: 1, step: 1, inst: 2, action: "A".into() },
                RecordEntry::Enter { thread: 2, step: 0, inst: 3, action: "B".into() },
            ],
        };
        let a = ExecutionRecord { inst: 2, entries: vec![w(1, 0, "x", 1), w(1, 1, "x", 2)] };
        let b = ExecutionRecord { inst: 3, entries: vec![w(2, 0, "y", 3), w(2, 1, "y", 4)] };
        let kids = BTreeMap::from([
            (2, OperationDAG::build(&a, &[]).unwrap()),
            (3, OperationDAG::build(&b, &[]).unwrap()),
        ]);
        let dag = OperationDAG::build(&parent, order).unwrap().expand(&kids);
        (dag, RegionTree::from([(1, None), (2, Some(1)), (3, Some(1))]))
    }

    #[test]
    fn default_strategy_rule() {
        let mut d = CAActionDef::new("A");
        assert_eq!(strategy_select(&d, None), Strategy::Flatten);
        d.nested.insert("N".into());
        assert_eq!(strategy_select(&d, None), Strategy::Nested);
        assert_eq!(strategy_select(&d, Some(Strategy::Flatten)), Strategy::Flatten);
    }

    #[test]
    fn unrelated_siblings_interleave_and_match_flatten() {
        let (dag, tree) = two_siblings(&[]);
        let plan = to_nested(&dag, &tree).unwrap();
        let ops: Vec<u64> = plan
            .iter()
            .filter_map(|p| match p {
                PlanItem::Op(n) => Some(dag.nodes[*n].region),
                _ => None,
            })
            .collect();
        assert!(ops.windows(2).any(|w| w[0] == 2 && w[1] == 3) || ops.windows(2).any(|w| w[0] == 3 && w[1] == 2));
        assert!(ops[1..].windows(2).all(|w| w[0] != w[1]), "round-robin between siblings: {ops:?}");

        let (mut s1, mut e1, mut t1) = (store(), engine(), Trace::new());
        execute(&plan, &dag, &mut s1, &mut e1, &mut t1).unwrap();
        let (mut s2, mut e2, mut t2) = (store(), engine(), Trace::new());
        execute(&flat_plan(&flatten(&dag).unwrap(), 1), &dag, &mut s2, &mut e2, &mut t2).unwrap();
        assert_eq!(s1.dump_stable(), s2.dump_stable());
        assert_eq!(s1.stable("y").unwrap().value, Value::from_int(4));
    }

    #[test]
    fn ordered_siblings_commit_before_begin() {
        let (dag, tree) = two_siblings(&[("A".into(), "B".into())]);
        let plan = to_nested(&dag, &tree).unwrap();
        let commit_a = plan.iter().position(|p| *p == PlanItem::Commit { region: 2 }).unwrap();
        let begin_b = plan.iter().position(|p| matches!(p, PlanItem::Begin { region: 3, .. })).unwrap();
        assert!(commit_a < begin_b);
    }

    #[test]
    fn single_nested_gives_parent_with_one_child() {
        let parent = ExecutionRecord {
            inst: 1,
            entries: vec![RecordEntry::Enter { thread: 1, step: 0, inst: 2, action: "N".into() }],
        };
        let n = ExecutionRecord { inst: 2, entries: vec![w(1, 0, "x", 5)] };
        let dag = OperationDAG::build(&parent, &[]).unwrap().expand(&BTreeMap::from([(2, OperationDAG::build(&n, &[]).unwrap())]));
        let plan = to_nested(&dag, &RegionTree::from([(1, None), (2, Some(1))])).unwrap();
        let (mut s, mut e, mut t) = (store(), engine(), Trace::new());
        let txns = execute(&plan, &dag, &mut s, &mut e, &mut t).unwrap();
        assert_eq!(txns.len(), 2);
        assert_eq!(e.txn(txns[&2]).unwrap().parent, Some(txns[&1]));
    }
}
