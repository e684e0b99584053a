//! Nested-transaction substrate.
//!
//! Flat transactions are depth-0 trees. Concurrency control is strict
//! two-phase locking with the nested grant rule: a lock is granted when every
//! holder of a conflicting lock is an ancestor of the requester. Committing a
//! child hands its locks and undo entries to the parent; aborting a subtree
//! replays its undo entries newest-first. Top-level commit runs two-phase
//! commit with presumed abort across the nodes that host the tree's objects.
//!
//! Writes are applied in place to volatile storage; stable storage changes
//! only when phase two applies the redo records of a prepared participant.

mod lock;
pub mod serializability;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::object_store::{LogRecord, NodeId, ObjectStore, RedoEntry, StoreError, Value};
use crate::trace::{Detail, Kind, Trace};

pub use lock::{Ancestry, Decision, Grant, LockMode, LockRequest, LockTable, ObjectLocks};
pub use serializability::{audit_serializability, ConflictGraph, MalformedTrace, SerializabilityVerdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TransactionId(pub u64);

impl fmt::Display for TransactionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.0)
    }
}

impl FromStr for TransactionId {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        s.strip_prefix('T').and_then(|n| n.parse().ok()).map(TransactionId).ok_or(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxnStatus {
    Active,
    Committed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UndoEntry {
    pub obj: String,
    pub old: Value,
    /// Global write order; merged logs stay sorted by it.
    pub stamp: u64,
    /// Caller-supplied region label, used for partial rollback.
    pub region: u64,
}

#[derive(Debug, Clone)]
pub struct TransactionNode {
    pub id: TransactionId,
    pub parent: Option<TransactionId>,
    pub root: TransactionId,
    pub status: TxnStatus,
    pub locks: BTreeMap<String, LockMode>,
    pub undo_log: Vec<UndoEntry>,
    pub children: BTreeSet<TransactionId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Phase {
    Running,
    Preparing { participants: Vec<NodeId>, prepared: BTreeSet<NodeId> },
    Committed { participants: Vec<NodeId>, acked: BTreeSet<NodeId> },
    Aborted,
}

#[derive(Debug, Clone)]
struct TopState {
    coordinator: NodeId,
    phase: Phase,
}

/// Engine variants. `EarlyRelease` drops every lock right after each read or
/// write and exists only so audits can be shown to catch a broken engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LockPolicy {
    #[default]
    Strict,
    EarlyRelease,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access<T> {
    Done(T),
    Queued,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Committed,
    Aborted,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Committed => "committed",
            Outcome::Aborted => "aborted",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InquiryAnswer {
    Commit,
    Abort,
    Wait,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TxnError {
    #[error("unknown transaction {0}")]
    UnknownTxn(TransactionId),
    #[error("parent {0} is not active")]
    ParentNotActive(TransactionId),
    #[error("transaction {0} is not active")]
    TxnNotActive(TransactionId),
    #[error("transaction {0} already terminated")]
    TxnTerminal(TransactionId),
    #[error("transaction {0} still has active children")]
    ChildrenActive(TransactionId),
    #[error("transaction {0} lost a wait-die arbitration on {1}")]
    DeadlockVictim(TransactionId, String),
    #[error("transaction {0} is not top-level")]
    NotTopLevel(TransactionId),
    #[error("transaction {0} is not in the expected commit phase")]
    WrongPhase(TransactionId),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// A queued request that lost arbitration after the holder set changed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Victim {
    pub txn: TransactionId,
    pub obj: String,
    pub tag: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CrashEffects {
    /// Top-level transactions aborted because their effects at the node were lost.
    pub aborted_roots: Vec<TransactionId>,
    /// Tags of queued requests on the crashed node's objects.
    pub failed_requests: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecoverEffects {
    /// Prepared participants on the recovered node awaiting a decision.
    pub in_doubt: Vec<(TransactionId, NodeId)>,
    /// Decided commits coordinated by the recovered node that still need phase two.
    pub resend: Vec<(TransactionId, Vec<NodeId>)>,
}

struct TreeView<'a>(&'a [TransactionNode]);

impl TreeView<'_> {
    fn get(&self, t: TransactionId) -> &TransactionNode {
        &self.0[(t.0 - 1) as usize]
    }
}

impl Ancestry for TreeView<'_> {
    fn is_ancestor_or_self(&self, ancestor: TransactionId, txn: TransactionId) -> bool {
        let mut cur = Some(txn);
        while let Some(c) = cur {
            if c == ancestor {
                return true;
            }
            cur = self.get(c).parent;
        }
        false
    }

    fn older(&self, a: TransactionId, b: TransactionId) -> bool {
        let (ra, rb) = (self.get(a).root, self.get(b).root);
        if ra == rb {
            a < b
        } else {
            ra < rb
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TxnEngine {
    txns: Vec<TransactionNode>,
    top: BTreeMap<TransactionId, TopState>,
    locks: LockTable,
    next_stamp: u64,
    policy: LockPolicy,
    default_node: Option<NodeId>,
    grants: Vec<Grant>,
    victims: Vec<Victim>,
    cancelled: Vec<u64>,
}

impl TxnEngine {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_policy(policy: LockPolicy) -> Self {
        TxnEngine { policy, ..Self::default() }
    }

    pub fn policy(&self) -> LockPolicy {
        self.policy
    }

    /// Coordinator used by `begin(None)`.
    pub fn set_default_node(&mut self, node: NodeId) {
        self.default_node = Some(node);
    }

    pub fn locks(&self) -> &LockTable {
        &self.locks
    }

    pub fn txn(&self, t: TransactionId) -> Result<&TransactionNode, TxnError> {
        (t.0 as usize).checked_sub(1).and_then(|i| self.txns.get(i)).ok_or(TxnError::UnknownTxn(t))
    }

    fn txn_mut(&mut self, t: TransactionId) -> Result<&mut TransactionNode, TxnError> {
        (t.0 as usize).checked_sub(1).and_then(|i| self.txns.get_mut(i)).ok_or(TxnError::UnknownTxn(t))
    }

    pub fn status(&self, t: TransactionId) -> Result<TxnStatus, TxnError> {
        self.txn(t).map(|n| n.status)
    }

    pub fn root_of(&self, t: TransactionId) -> Result<TransactionId, TxnError> {
        self.txn(t).map(|n| n.root)
    }

    pub fn is_ancestor_or_self(&self, ancestor: TransactionId, t: TransactionId) -> bool {
        TreeView(&self.txns).is_ancestor_or_self(ancestor, t)
    }

    pub fn coordinator(&self, root: TransactionId) -> Option<&NodeId> {
        self.top.get(&root).map(|s| &s.coordinator)
    }

    pub fn is_decided(&self, root: TransactionId) -> bool {
        matches!(self.top.get(&root).map(|s| &s.phase), Some(Phase::Committed { .. }))
    }

    pub fn is_preparing(&self, root: TransactionId) -> bool {
        matches!(self.top.get(&root).map(|s| &s.phase), Some(Phase::Preparing { .. }))
    }

    pub fn transactions(&self) -> impl Iterator<Item = &TransactionNode> {
        self.txns.iter()
    }

    /// Lock grants produced by releases since the last call.
    pub fn take_grants(&mut self) -> Vec<Grant> {
        std::mem::take(&mut self.grants)
    }

    /// Queued requests that must now be aborted under wait-die.
    pub fn take_victims(&mut self) -> Vec<Victim> {
        std::mem::take(&mut self.victims)
    }

    /// Tags of queued requests dropped because their transaction ended.
    pub fn take_cancelled(&mut self) -> Vec<u64> {
        std::mem::take(&mut self.cancelled)
    }

    pub fn begin(&mut self, trace: &mut Trace, parent: Option<TransactionId>) -> Result<TransactionId, TxnError> {
        let node = self.default_node.clone().unwrap_or_else(|| NodeId::new("local"));
        self.begin_on(trace, parent, node)
    }

    /// Begins a transaction. A top-level transaction is coordinated from `node`;
    /// children ignore it.
    pub fn begin_on(
        &mut self,
        trace: &mut Trace,
        parent: Option<TransactionId>,
        node: NodeId,
    ) -> Result<TransactionId, TxnError> {
        let id = TransactionId(self.txns.len() as u64 + 1);
        let root = match parent {
            Some(p) => {
                let pn = self.txn(p)?;
                if pn.status != TxnStatus::Active || self.top.get(&pn.root).is_some_and(|s| s.phase != Phase::Running) {
                    return Err(TxnError::ParentNotActive(p));
                }
                pn.root
            }
            None => id,
        };
        self.txns.push(TransactionNode {
            id,
            parent,
            root,
            status: TxnStatus::Active,
            locks: BTreeMap::new(),
            undo_log: Vec::new(),
            children: BTreeSet::new(),
        });
        let mut detail = Detail::new();
        match parent {
            Some(p) => {
                self.txn_mut(p)?.children.insert(id);
                detail = detail.with("parent", p);
            }
            None => {
                detail = detail.with("node", &node);
                self.top.insert(id, TopState { coordinator: node, phase: Phase::Running });
            }
        }
        trace.push(Kind::Begin, Some(id), None, detail);
        Ok(id)
    }

    fn check_active(&self, t: TransactionId) -> Result<(), TxnError> {
        let n = self.txn(t)?;
        if n.status != TxnStatus::Active {
            return Err(TxnError::TxnNotActive(t));
        }
        Ok(())
    }

    /// Requests a lock. Blocking is modelled by `Access::Queued`; the grant
    /// shows up later in `take_grants` carrying `tag`.
    pub fn acquire(
        &mut self,
        store: &ObjectStore,
        trace: &mut Trace,
        txn: TransactionId,
        obj: &str,
        mode: LockMode,
        tag: u64,
    ) -> Result<Access<()>, TxnError> {
        self.check_active(txn)?;
        let home = store.home_of(obj)?;
        if !store.is_up(home) {
            return Err(StoreError::NodeDown(home.clone()).into());
        }
        if self.txn(txn)?.locks.get(obj).is_some_and(|m| *m == mode || *m == LockMode::Write) {
            return Ok(Access::Done(()));
        }
        let decision = self.locks.decide(&TreeView(&self.txns), obj, txn, mode);
        match decision {
            Decision::Grant => {
                let held = self.locks.grant(obj, txn, mode);
                self.txn_mut(txn)?.locks.insert(obj.to_owned(), held);
                trace.push(Kind::Grant, Some(txn), Some(obj), Detail::new().with("mode", held));
                Ok(Access::Done(()))
            }
            Decision::Queue => {
                self.locks.enqueue(obj, LockRequest { txn, mode, tag });
                trace.push(Kind::Queue, Some(txn), Some(obj), Detail::new().with("mode", mode));
                Ok(Access::Queued)
            }
            Decision::Die => {
                trace.push(Kind::Queue, Some(txn), Some(obj), Detail::new().with("mode", mode).flag("die"));
                Err(TxnError::DeadlockVictim(txn, obj.to_owned()))
            }
        }
    }

    pub fn read(
        &mut self,
        store: &ObjectStore,
        trace: &mut Trace,
        txn: TransactionId,
        obj: &str,
        tag: u64,
    ) -> Result<Access<Value>, TxnError> {
        self.read_tagged(store, trace, txn, obj, tag, &Detail::new())
    }

    /// Reads and writes also carry a `detail` the caller wants recorded on the
    /// event (thread and instance labels, for example).
    pub fn read_tagged(
        &mut self,
        store: &ObjectStore,
        trace: &mut Trace,
        txn: TransactionId,
        obj: &str,
        tag: u64,
        extra: &Detail,
    ) -> Result<Access<Value>, TxnError> {
        if self.acquire(store, trace, txn, obj, LockMode::Read, tag)? == Access::Queued {
            return Ok(Access::Queued);
        }
        let v = store.volatile(obj)?.value.clone();
        trace.push(Kind::Read, Some(txn), Some(obj), Detail::new().with("val", v.to_hex()).extend(extra));
        self.after_access(store, trace, txn);
        Ok(Access::Done(v))
    }

    pub fn write(
        &mut self,
        store: &mut ObjectStore,
        trace: &mut Trace,
        txn: TransactionId,
        obj: &str,
        value: Value,
        tag: u64,
    ) -> Result<Access<()>, TxnError> {
        self.write_tagged(store, trace, txn, obj, value, 0, tag, &Detail::new())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn write_tagged(
        &mut self,
        store: &mut ObjectStore,
        trace: &mut Trace,
        txn: TransactionId,
        obj: &str,
        value: Value,
        region: u64,
        tag: u64,
        extra: &Detail,
    ) -> Result<Access<()>, TxnError> {
        if self.acquire(store, trace, txn, obj, LockMode::Write, tag)? == Access::Queued {
            return Ok(Access::Queued);
        }
        let old = store.volatile(obj)?.value.clone();
        store.set_volatile(obj, value.clone())?;
        self.next_stamp += 1;
        let stamp = self.next_stamp;
        self.txn_mut(txn)?.undo_log.push(UndoEntry { obj: obj.to_owned(), old, stamp, region });
        trace.push(Kind::Write, Some(txn), Some(obj), Detail::new().with("val", value.to_hex()).extend(extra));
        self.after_access(store, trace, txn);
        Ok(Access::Done(()))
    }

    fn after_access(&mut self, store: &ObjectStore, trace: &mut Trace, txn: TransactionId) {
        if self.policy == LockPolicy::EarlyRelease {
            let held: Vec<String> = self.txns[(txn.0 - 1) as usize].locks.keys().cloned().collect();
            self.txns[(txn.0 - 1) as usize].locks.clear();
            for obj in &held {
                self.locks.release(obj, txn);
            }
            self.reexamine_all(store, trace, held.iter().map(String::as_str));
        }
    }

    fn reexamine_all<'a>(&mut self, _store: &ObjectStore, trace: &mut Trace, objs: impl IntoIterator<Item = &'a str>) {
        let objs: BTreeSet<&str> = objs.into_iter().collect();
        for obj in objs {
            let (grants, victims) = self.locks.reexamine(&TreeView(&self.txns), obj);
            for g in grants {
                self.txns[(g.txn.0 - 1) as usize].locks.insert(g.obj.clone(), g.mode);
                trace.push(Kind::Grant, Some(g.txn), Some(&g.obj), Detail::new().with("mode", g.mode).flag("queued"));
                self.grants.push(g);
            }
            for (obj, r) in victims {
                trace.push(Kind::Queue, Some(r.txn), Some(&obj), Detail::new().with("mode", r.mode).flag("die"));
                self.victims.push(Victim { txn: r.txn, obj, tag: r.tag });
            }
        }
    }

    /// Nested commit hands locks and undo entries to the parent. Top-level
    /// commit runs the whole two-phase protocol synchronously.
    pub fn commit(&mut self, store: &mut ObjectStore, trace: &mut Trace, txn: TransactionId) -> Result<Outcome, TxnError> {
        let node = self.txn(txn)?;
        if node.status != TxnStatus::Active {
            return Err(TxnError::TxnNotActive(txn));
        }
        if node.parent.is_some() {
            self.commit_nested(store, trace, txn)?;
            return Ok(Outcome::Committed);
        }
        let participants = self.begin_top_commit(store, txn)?;
        for p in &participants {
            if !self.prepare_at(store, trace, txn, p)? {
                self.abort(store, trace, txn)?;
                return Ok(Outcome::Aborted);
            }
        }
        self.decide_commit(store, trace, txn)?;
        for p in &participants {
            self.apply_at(store, trace, txn, p)?;
            self.record_ack(store, txn, p)?;
        }
        Ok(Outcome::Committed)
    }

    fn commit_nested(&mut self, store: &ObjectStore, trace: &mut Trace, txn: TransactionId) -> Result<(), TxnError> {
        let node = self.txn(txn)?;
        if node.children.iter().any(|c| self.txns[(c.0 - 1) as usize].status == TxnStatus::Active) {
            return Err(TxnError::ChildrenActive(txn));
        }
        let parent = node.parent.expect("nested commit has a parent");
        let locks = std::mem::take(&mut self.txn_mut(txn)?.locks);
        let undo = std::mem::take(&mut self.txn_mut(txn)?.undo_log);
        self.txn_mut(txn)?.status = TxnStatus::Committed;
        for obj in locks.keys() {
            if let Some(m) = self.locks.transfer(obj, txn, parent) {
                self.txn_mut(parent)?.locks.insert(obj.clone(), m);
            }
        }
        let p = self.txn_mut(parent)?;
        p.undo_log.extend(undo);
        p.undo_log.sort_by_key(|e| e.stamp);
        trace.push(Kind::Commit2, Some(txn), None, Detail::new().with("nested", parent));
        self.reexamine_all(store, trace, locks.keys().map(String::as_str));
        Ok(())
    }

    fn nodes_of_tree(&self, store: &ObjectStore, root: TransactionId) -> Vec<NodeId> {
        let n = &self.txns[(root.0 - 1) as usize];
        let mut nodes = BTreeSet::new();
        for obj in n.locks.keys().chain(n.undo_log.iter().map(|e| &e.obj)) {
            if let Ok(h) = store.home_of(obj) {
                nodes.insert(h.clone());
            }
        }
        nodes.into_iter().collect()
    }

    /// Freezes a top-level transaction for commit and returns its participant nodes.
    pub fn begin_top_commit(&mut self, store: &ObjectStore, txn: TransactionId) -> Result<Vec<NodeId>, TxnError> {
        let node = self.txn(txn)?;
        if node.parent.is_some() {
            return Err(TxnError::NotTopLevel(txn));
        }
        if node.status != TxnStatus::Active {
            return Err(TxnError::TxnNotActive(txn));
        }
        if node.children.iter().any(|c| self.txns[(c.0 - 1) as usize].status == TxnStatus::Active) {
            return Err(TxnError::ChildrenActive(txn));
        }
        if self.top[&txn].phase != Phase::Running {
            return Err(TxnError::WrongPhase(txn));
        }
        let participants = self.nodes_of_tree(store, txn);
        self.top.get_mut(&txn).expect("top state").phase =
            Phase::Preparing { participants: participants.clone(), prepared: BTreeSet::new() };
        Ok(participants)
    }

    /// Phase one at one participant: persist redo records. Returns the vote.
    pub fn prepare_at(
        &mut self,
        store: &mut ObjectStore,
        trace: &mut Trace,
        txn: TransactionId,
        node: &NodeId,
    ) -> Result<bool, TxnError> {
        let coordinator = match self.top.get(&txn) {
            Some(TopState { coordinator, phase: Phase::Preparing { .. } }) => coordinator.clone(),
            Some(TopState { phase: Phase::Aborted, .. }) => return Ok(false),
            _ => return Err(TxnError::WrongPhase(txn)),
        };
        if !store.is_up(node) {
            return Ok(false);
        }
        let mut written: Vec<&str> = Vec::new();
        for e in &self.txns[(txn.0 - 1) as usize].undo_log {
            if store.home_of(&e.obj).is_ok_and(|h| h == node) && !written.contains(&e.obj.as_str()) {
                written.push(&e.obj);
            }
        }
        written.sort_unstable();
        let mut redo = Vec::new();
        for obj in written {
            let v = store.volatile(obj)?;
            redo.push(RedoEntry { object: obj.to_owned(), value: v.value.clone(), version: v.version + 1 });
        }
        for r in &redo {
            trace.push(
                Kind::Commit1,
                Some(txn),
                Some(&r.object),
                Detail::new().with("node", node).with("ver", r.version).with("val", r.value.to_hex()),
            );
        }
        trace.push(Kind::Commit1, Some(txn), None, Detail::new().with("node", node).with("prepared", redo.len()));
        if !redo.is_empty() {
            store.append_log(node, LogRecord::Prepared { txn, coordinator, redo })?;
        }
        if let Some(TopState { phase: Phase::Preparing { prepared, .. }, .. }) = self.top.get_mut(&txn) {
            prepared.insert(node.clone());
        }
        Ok(true)
    }

    /// Commit point: writes the commit record at the coordinator.
    pub fn decide_commit(&mut self, store: &mut ObjectStore, trace: &mut Trace, txn: TransactionId) -> Result<(), TxnError> {
        let state = self.top.get(&txn).ok_or(TxnError::NotTopLevel(txn))?;
        let Phase::Preparing { participants, prepared } = &state.phase else {
            return Err(TxnError::WrongPhase(txn));
        };
        if participants.iter().any(|p| !prepared.contains(p)) {
            return Err(TxnError::WrongPhase(txn));
        }
        let participants = participants.clone();
        let coordinator = state.coordinator.clone();
        store.append_log(&coordinator, LogRecord::Commit { txn, participants: participants.clone() })?;
        self.top.get_mut(&txn).expect("top state").phase = Phase::Committed { participants, acked: BTreeSet::new() };
        self.txn_mut(txn)?.status = TxnStatus::Committed;
        trace.push(Kind::Commit2, Some(txn), None, Detail::new().flag("decide").with("node", &coordinator));
        Ok(())
    }

    fn unresolved_prepare<'s>(store: &'s ObjectStore, node: &NodeId, txn: TransactionId) -> Option<&'s [RedoEntry]> {
        let log = store.log(node);
        if log.iter().any(|r| matches!(r, LogRecord::Resolved { txn: t } if *t == txn)) {
            return None;
        }
        log.iter().find_map(|r| match r {
            LogRecord::Prepared { txn: t, redo, .. } if *t == txn => Some(redo.as_slice()),
            _ => None,
        })
    }

    fn is_resolved_at(store: &ObjectStore, node: &NodeId, txn: TransactionId) -> bool {
        store.log(node).iter().any(|r| matches!(r, LogRecord::Resolved { txn: t } if *t == txn))
    }

    /// Phase two at one participant. Returns false when the node is down.
    /// Applying twice is a no-op.
    pub fn apply_at(
        &mut self,
        store: &mut ObjectStore,
        trace: &mut Trace,
        txn: TransactionId,
        node: &NodeId,
    ) -> Result<bool, TxnError> {
        if !self.is_decided(txn) {
            return Err(TxnError::WrongPhase(txn));
        }
        if !store.is_up(node) {
            return Ok(false);
        }
        if Self::is_resolved_at(store, node, txn) {
            return Ok(true);
        }
        let redo = Self::unresolved_prepare(store, node, txn).map(<[RedoEntry]>::to_vec).unwrap_or_default();
        for r in &redo {
            store.apply_stable(&r.object, r.value.clone(), r.version)?;
            trace.push(
                Kind::Commit2,
                Some(txn),
                Some(&r.object),
                Detail::new().with("node", node).with("ver", r.version).with("val", r.value.to_hex()),
            );
        }
        if !redo.is_empty() {
            store.append_log(node, LogRecord::Resolved { txn })?;
        }
        trace.push(Kind::Commit2, Some(txn), None, Detail::new().with("node", node).with("applied", redo.len()));
        self.release_at(store, trace, txn, node);
        Ok(true)
    }

    fn release_at(&mut self, store: &ObjectStore, trace: &mut Trace, txn: TransactionId, node: &NodeId) {
        let objs: Vec<String> = self.txns[(txn.0 - 1) as usize]
            .locks
            .keys()
            .filter(|o| store.home_of(o).is_ok_and(|h| h == node))
            .cloned()
            .collect();
        for o in &objs {
            self.txns[(txn.0 - 1) as usize].locks.remove(o);
            self.locks.release(o, txn);
        }
        self.reexamine_all(store, trace, objs.iter().map(String::as_str));
    }

    /// Records a phase-two acknowledgement; writes the end record once all
    /// participants acknowledged. Returns true when the protocol is finished.
    pub fn record_ack(&mut self, store: &mut ObjectStore, txn: TransactionId, node: &NodeId) -> Result<bool, TxnError> {
        let state = self.top.get_mut(&txn).ok_or(TxnError::NotTopLevel(txn))?;
        let coordinator = state.coordinator.clone();
        let Phase::Committed { participants, acked } = &mut state.phase else {
            return Err(TxnError::WrongPhase(txn));
        };
        let was_done = participants.iter().all(|p| acked.contains(p));
        acked.insert(node.clone());
        let done = participants.iter().all(|p| acked.contains(p));
        if done && !was_done && store.is_up(&coordinator) {
            store.append_log(&coordinator, LogRecord::End { txn })?;
        }
        Ok(done)
    }

    pub fn abort(&mut self, store: &mut ObjectStore, trace: &mut Trace, txn: TransactionId) -> Result<(), TxnError> {
        let n = self.txn(txn)?;
        if n.status != TxnStatus::Active {
            return Err(TxnError::TxnTerminal(txn));
        }
        let mut touched = BTreeSet::new();
        self.abort_subtree(store, trace, txn, &mut touched);
        if let Some(state) = self.top.get_mut(&txn) {
            let prepared = match &state.phase {
                Phase::Preparing { prepared, .. } => prepared.clone(),
                _ => BTreeSet::new(),
            };
            state.phase = Phase::Aborted;
            for p in prepared {
                if store.is_up(&p) && Self::unresolved_prepare(store, &p, txn).is_some() {
                    store.append_log(&p, LogRecord::Resolved { txn })?;
                }
            }
        }
        self.reexamine_all(store, trace, touched.iter().map(String::as_str));
        Ok(())
    }

    fn abort_subtree(&mut self, store: &mut ObjectStore, trace: &mut Trace, txn: TransactionId, touched: &mut BTreeSet<String>) {
        let children: Vec<TransactionId> = self.txns[(txn.0 - 1) as usize].children.iter().copied().collect();
        for c in children {
            if self.txns[(c.0 - 1) as usize].status == TxnStatus::Active {
                self.abort_subtree(store, trace, c, touched);
            }
        }
        let node = &mut self.txns[(txn.0 - 1) as usize];
        node.status = TxnStatus::Aborted;
        let undo = std::mem::take(&mut node.undo_log);
        let locks = std::mem::take(&mut node.locks);
        for e in undo.iter().rev() {
            if store.home_of(&e.obj).is_ok_and(|h| store.is_up(h)) {
                let _ = store.set_volatile(&e.obj, e.old.clone());
                trace.push(Kind::Write, Some(txn), Some(&e.obj), Detail::new().with("val", e.old.to_hex()).flag("undo"));
            }
        }
        for obj in locks.keys() {
            self.locks.release(obj, txn);
            touched.insert(obj.clone());
        }
        let cancelled = self.locks.cancel_where(|_, r| r.txn == txn);
        for (obj, r) in cancelled {
            touched.insert(obj);
            self.cancelled.push(r.tag);
        }
        trace.push(Kind::Abort, Some(txn), None, Detail::new());
    }

    /// Rolls back the undo entries of `txn` whose region is in `regions`,
    /// newest first, leaving the rest of the transaction intact.
    pub fn rollback_regions(
        &mut self,
        store: &mut ObjectStore,
        trace: &mut Trace,
        txn: TransactionId,
        regions: &BTreeSet<u64>,
    ) -> Result<(), TxnError> {
        self.check_active(txn)?;
        let node = self.txn_mut(txn)?;
        let (undo, keep): (Vec<UndoEntry>, Vec<UndoEntry>) =
            std::mem::take(&mut node.undo_log).into_iter().partition(|e| regions.contains(&e.region));
        node.undo_log = keep;
        for e in undo.iter().rev() {
            if store.home_of(&e.obj).is_ok_and(|h| store.is_up(h)) {
                store.set_volatile(&e.obj, e.old.clone())?;
                trace.push(Kind::Write, Some(txn), Some(&e.obj), Detail::new().with("val", e.old.to_hex()).flag("undo"));
            }
        }
        Ok(())
    }

    /// Drops queued requests carrying any of the given tags.
    pub fn cancel_requests(&mut self, tags: &BTreeSet<u64>) {
        self.locks.cancel_where(|_, r| tags.contains(&r.tag));
    }

    /// Crash handling: lock state at the node is volatile and disappears.
    /// Undecided trees that lost unprepared effects there, or whose coordinator
    /// ran there, are aborted.
    pub fn on_crash(&mut self, store: &mut ObjectStore, trace: &mut Trace, node: &NodeId) -> CrashEffects {
        let mut effects = CrashEffects::default();
        let objs: Vec<String> = store.objects_at(node).map(|o| o.name.clone()).collect();
        let mut touched_roots = BTreeSet::new();
        for t in &self.txns {
            if t.status == TxnStatus::Active
                && (t.locks.keys().any(|o| objs.contains(o)) || t.undo_log.iter().any(|e| objs.contains(&e.obj)))
            {
                touched_roots.insert(t.root);
            }
        }
        for obj in &objs {
            if let Some(locks) = self.locks.clear_object(obj) {
                for (h, _) in locks.holders() {
                    self.txns[(h.0 - 1) as usize].locks.remove(obj);
                }
                for r in locks.queue() {
                    effects.failed_requests.push(r.tag);
                }
            }
        }
        let mut victims = Vec::new();
        for (root, state) in &self.top {
            if self.txns[(root.0 - 1) as usize].status != TxnStatus::Active {
                continue;
            }
            let prepared_here = matches!(&state.phase, Phase::Preparing { prepared, .. } if prepared.contains(node));
            if &state.coordinator == node || (touched_roots.contains(root) && !prepared_here) {
                victims.push(*root);
            }
        }
        for root in victims {
            if self.abort(store, trace, root).is_ok() {
                effects.aborted_roots.push(root);
            }
        }
        effects
    }

    /// Recovery: re-locks the objects of in-doubt prepared transactions and
    /// lists decided commits this node still has to push through phase two.
    pub fn on_recover(&mut self, store: &ObjectStore, trace: &mut Trace, node: &NodeId) -> RecoverEffects {
        let mut effects = RecoverEffects::default();
        let log = store.log(node).to_vec();
        for rec in &log {
            match rec {
                LogRecord::Prepared { txn, coordinator, redo } if Self::unresolved_prepare(store, node, *txn).is_some() => {
                    for r in redo {
                        let held = self.locks.grant(&r.object, *txn, LockMode::Write);
                        self.txns[(txn.0 - 1) as usize].locks.insert(r.object.clone(), held);
                        trace.push(Kind::Grant, Some(*txn), Some(&r.object), Detail::new().with("mode", held).flag("recovered"));
                    }
                    effects.in_doubt.push((*txn, coordinator.clone()));
                }
                LogRecord::Commit { txn, participants }
                    if !log.iter().any(|r| matches!(r, LogRecord::End { txn: t } if t == txn)) =>
                {
                    effects.resend.push((*txn, participants.clone()));
                }
                _ => {}
            }
        }
        effects
    }

    /// The coordinator's answer to an in-doubt participant, from its stable log.
    pub fn answer_inquiry(&self, store: &ObjectStore, coordinator: &NodeId, txn: TransactionId) -> InquiryAnswer {
        if store.log(coordinator).iter().any(|r| matches!(r, LogRecord::Commit { txn: t, .. } if *t == txn)) {
            InquiryAnswer::Commit
        } else if self.is_preparing(txn) {
            InquiryAnswer::Wait
        } else {
            InquiryAnswer::Abort
        }
    }

    /// Presumed-abort resolution at a participant that learned the outcome.
    pub fn resolve_abort_at(
        &mut self,
        store: &mut ObjectStore,
        trace: &mut Trace,
        txn: TransactionId,
        node: &NodeId,
    ) -> Result<(), TxnError> {
        if !store.is_up(node) || Self::unresolved_prepare(store, node, txn).is_none() {
            return Ok(());
        }
        store.append_log(node, LogRecord::Resolved { txn })?;
        trace.push(Kind::Abort, Some(txn), None, Detail::new().with("node", node).flag("presumed"));
        self.release_at(store, trace, txn, node);
        Ok(())
    }

    pub fn has_unresolved_prepare(store: &ObjectStore, node: &NodeId, txn: TransactionId) -> bool {
        Self::unresolved_prepare(store, node, txn).is_some()
    }
}

#[cfg(test)]
mod tests;
