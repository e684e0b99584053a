//! Live action instances: entry gathering, nesting checks, signals, the test
//! line and coordinated abort.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use super::def::{CAActionDef, Library, Mode};
use crate::object_store::{ObjectStore, Snapshot};
use crate::trace::{Detail, Kind, Trace};
use crate::txn_engine::{Outcome, TransactionId, TxnEngine, TxnStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ThreadId(pub u64);

impl fmt::Display for ThreadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InstanceId(pub u64);

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceStatus {
    Gathering,
    /// All roles registered; waiting for ordering constraints and footprint locks.
    Starting,
    Running,
    Testing,
    /// Top-level only: test line passed, two-phase commit under way.
    Committing,
    Committed,
    Aborted,
}

impl InstanceStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, InstanceStatus::Committed | InstanceStatus::Aborted)
    }

    /// Still able to abort: not terminal and no commit decision taken.
    pub fn is_open(self) -> bool {
        !self.is_terminal() && self != InstanceStatus::Committing
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AbortCause {
    AcceptanceTest,
    Crash,
    Deadlock,
    EntryTimeout,
    UnmatchedAwait,
    Horizon,
    Parent,
    Escalated,
    Evaluation,
}

impl fmt::Display for AbortCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AbortCause::AcceptanceTest => "test",
            AbortCause::Crash => "crash",
            AbortCause::Deadlock => "deadlock",
            AbortCause::EntryTimeout => "entry_timeout",
            AbortCause::UnmatchedAwait => "quiescence",
            AbortCause::Horizon => "horizon",
            AbortCause::Parent => "parent",
            AbortCause::Escalated => "escalated",
            AbortCause::Evaluation => "evaluation",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnterError {
    #[error("unknown action `{0}`")]
    UnknownAction(String),
    #[error("action `{action}` has no role `{role}`")]
    UnknownRole { action: String, role: String },
    #[error("role `{0}` is already taken")]
    RoleTaken(String),
    #[error("thread is not a participant of the parent instance")]
    NotParentParticipant,
    #[error("`{0}` is not a nested action of the parent")]
    NotNested(String),
    #[error("nesting violates the parent's concurrency mode")]
    ModeViolation,
    #[error("parent instance is not running")]
    ParentNotRunning,
}

impl EnterError {
    pub fn code(&self) -> &'static str {
        match self {
            EnterError::UnknownAction(_) => "unknown_action",
            EnterError::UnknownRole { .. } => "unknown_role",
            EnterError::RoleTaken(_) => "role_taken",
            EnterError::NotParentParticipant => "not_parent_participant",
            EnterError::NotNested(_) => "not_nested",
            EnterError::ModeViolation => "mode_violation",
            EnterError::ParentNotRunning => "parent_not_running",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CAActionInstance {
    pub id: InstanceId,
    pub action: String,
    pub parent: Option<InstanceId>,
    /// Client label that groups top-level entries.
    pub label: Option<String>,
    pub registered: BTreeMap<String, ThreadId>,
    pub status: InstanceStatus,
    pub recovery_line: Option<Snapshot>,
    pub bound_txn: Option<TransactionId>,
    pub entry_deadline: u64,
    pub children: Vec<InstanceId>,
    pub signals: BTreeSet<String>,
    pub arrived: BTreeSet<ThreadId>,
    pub outcome: Option<(Outcome, Option<AbortCause>)>,
}

impl CAActionInstance {
    pub fn participants(&self) -> impl Iterator<Item = ThreadId> + '_ {
        self.registered.values().copied()
    }

    pub fn has_participant(&self, t: ThreadId) -> bool {
        self.registered.values().any(|p| *p == t)
    }
}

/// Result of a coordinated abort.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AbortReport {
    /// The instance and every open descendant, leaves first.
    pub aborted: Vec<InstanceId>,
    /// Footprint objects on live nodes that did not match the recovery line
    /// before it was reinstated.
    pub mismatched: Vec<String>,
}

/// Registry of live instances.
#[derive(Debug, Clone, Default)]
pub struct ActionManager {
    library: Library,
    instances: Vec<CAActionInstance>,
}

impl ActionManager {
    pub fn new(library: Library) -> Self {
        ActionManager { library, instances: Vec::new() }
    }

    pub fn library(&self) -> &Library {
        &self.library
    }

    pub fn def(&self, inst: InstanceId) -> &CAActionDef {
        self.library.get(&self.get(inst).action).expect("instance of a known action")
    }

    pub fn get(&self, inst: InstanceId) -> &CAActionInstance {
        &self.instances[inst.0 as usize - 1]
    }

    pub fn get_mut(&mut self, inst: InstanceId) -> &mut CAActionInstance {
        &mut self.instances[inst.0 as usize - 1]
    }

    pub fn instances(&self) -> impl Iterator<Item = &CAActionInstance> {
        self.instances.iter()
    }

    pub fn root_of(&self, mut inst: InstanceId) -> InstanceId {
        while let Some(p) = self.get(inst).parent {
            inst = p;
        }
        inst
    }

    pub fn depth(&self, mut inst: InstanceId) -> usize {
        let mut d = 0;
        while let Some(p) = self.get(inst).parent {
            inst = p;
            d += 1;
        }
        d
    }

    pub fn is_ancestor_or_self(&self, ancestor: InstanceId, inst: InstanceId) -> bool {
        let mut cur = Some(inst);
        while let Some(c) = cur {
            if c == ancestor {
                return true;
            }
            cur = self.get(c).parent;
        }
        false
    }

    /// `inst` and all its descendants, parents before children.
    pub fn subtree(&self, inst: InstanceId) -> Vec<InstanceId> {
        let mut out = vec![inst];
        let mut i = 0;
        while i < out.len() {
            out.extend(self.get(out[i]).children.iter().copied());
            i += 1;
        }
        out
    }

    /// Instance the label's clients are gathering into or running, if any.
    pub fn current_for_label(&self, label: &str) -> Option<InstanceId> {
        self.instances
            .iter()
            .rev()
            .find(|i| i.parent.is_none() && i.label.as_deref() == Some(label))
            .map(|i| i.id)
    }

    fn check_nesting(&self, thread: ThreadId, action: &CAActionDef, parent: InstanceId) -> Result<(), EnterError> {
        let p = self.get(parent);
        let pdef = self.def(parent);
        if !p.has_participant(thread) {
            return Err(EnterError::NotParentParticipant);
        }
        if !matches!(p.status, InstanceStatus::Running) {
            return Err(EnterError::ParentNotRunning);
        }
        if !pdef.nested.contains(&action.name) {
            return Err(EnterError::NotNested(action.name.clone()));
        }
        match pdef.mode {
            Mode::Flat => Err(EnterError::ModeViolation),
            Mode::NestedSameKind if pdef.is_multi_role() != action.is_multi_role() => Err(EnterError::ModeViolation),
            _ => Ok(()),
        }
    }

    /// Registers `thread` for `role`. Entries of one top-level instance share
    /// a client label; nested entries join the gathering instance of the same
    /// action under the same parent. Returns the instance and whether every
    /// role is now registered. Rejections are traced too.
    #[allow(clippy::too_many_arguments)]
    pub fn enter(
        &mut self,
        trace: &mut Trace,
        thread: ThreadId,
        action: &str,
        role: &str,
        parent: Option<InstanceId>,
        label: Option<&str>,
        extra: &Detail,
    ) -> Result<(InstanceId, bool), EnterError> {
        let r = self.try_enter(thread, action, role, parent, label);
        let mut d = Detail::new().with("action", action).with("role", role).with("thr", thread);
        if let Some(p) = parent {
            d = d.with("parent", p);
        }
        let d = d.extend(extra);
        match &r {
            Ok((inst, _)) => {
                trace.push(Kind::Register, None, None, Detail::new().with("inst", inst).extend(&d));
            }
            Err(e) => {
                trace.push(Kind::Register, None, None, d.with("rejected", e.code()));
            }
        }
        r
    }

    fn try_enter(
        &mut self,
        thread: ThreadId,
        action: &str,
        role: &str,
        parent: Option<InstanceId>,
        label: Option<&str>,
    ) -> Result<(InstanceId, bool), EnterError> {
        let def = self.library.get(action).ok_or_else(|| EnterError::UnknownAction(action.to_owned()))?;
        if def.role(role).is_none() {
            return Err(EnterError::UnknownRole { action: action.to_owned(), role: role.to_owned() });
        }
        if let Some(p) = parent {
            self.check_nesting(thread, def, p)?;
        }
        let n_roles = def.roles.len();
        let gathering = self.instances.iter().rev().find(|i| {
            i.status == InstanceStatus::Gathering
                && i.action == action
                && i.parent == parent
                && (parent.is_some() || i.label.as_deref() == label)
        });
        let id = match gathering {
            Some(i) if i.registered.contains_key(role) => return Err(EnterError::RoleTaken(role.to_owned())),
            Some(i) if i.has_participant(thread) => return Err(EnterError::RoleTaken(role.to_owned())),
            Some(i) => i.id,
            None => {
                let id = InstanceId(self.instances.len() as u64 + 1);
                self.instances.push(CAActionInstance {
                    id,
                    action: action.to_owned(),
                    parent,
                    label: label.map(str::to_owned),
                    registered: BTreeMap::new(),
                    status: InstanceStatus::Gathering,
                    recovery_line: None,
                    bound_txn: None,
                    entry_deadline: 0,
                    children: Vec::new(),
                    signals: BTreeSet::new(),
                    arrived: BTreeSet::new(),
                    outcome: None,
                });
                if let Some(p) = parent {
                    self.get_mut(p).children.push(id);
                }
                id
            }
        };
        let inst = self.get_mut(id);
        inst.registered.insert(role.to_owned(), thread);
        let complete = inst.registered.len() == n_roles;
        if complete {
            inst.status = InstanceStatus::Starting;
        }
        Ok((id, complete))
    }

    pub fn set_deadline(&mut self, inst: InstanceId, now: u64) {
        let d = self.def(inst).deadline;
        self.get_mut(inst).entry_deadline = now.saturating_add(d);
    }

    /// Takes the recovery line over the footprint and marks the instance running.
    pub fn take_recovery_line(&mut self, store: &mut ObjectStore, trace: &mut Trace, inst: InstanceId) -> Result<(), crate::object_store::StoreError> {
        let footprint: Vec<String> = self.def(inst).footprint.iter().cloned().collect();
        let snap = store.take_snapshot(footprint.iter().map(String::as_str))?;
        let mut d = Detail::new().with("inst", inst).with("snap", snap.label());
        for (name, v) in snap.entries() {
            d = d.with(&format!("v.{name}"), v.value.to_hex());
        }
        let txn = self.get(inst).bound_txn;
        trace.push(Kind::LineRecovery, txn, None, d);
        let i = self.get_mut(inst);
        i.recovery_line = Some(snap);
        i.status = InstanceStatus::Running;
        Ok(())
    }

    pub fn emit(&mut self, trace: &mut Trace, inst: InstanceId, thread: ThreadId, signal: &str, extra: &Detail) {
        self.get_mut(inst).signals.insert(signal.to_owned());
        let txn = self.get(inst).bound_txn;
        trace.push(Kind::SyncEmit, txn, None, Detail::new().with("sig", signal).with("inst", inst).with("thr", thread).extend(extra));
    }

    /// Completes an await if the signal was emitted.
    pub fn try_await(&mut self, trace: &mut Trace, inst: InstanceId, thread: ThreadId, signal: &str, extra: &Detail) -> bool {
        if !self.get(inst).signals.contains(signal) {
            return false;
        }
        let txn = self.get(inst).bound_txn;
        trace.push(Kind::SyncAwait, txn, None, Detail::new().with("sig", signal).with("inst", inst).with("thr", thread).extend(extra));
        true
    }

    /// Records arrival at the test line; true once every participant arrived.
    pub fn arrive(&mut self, inst: InstanceId, thread: ThreadId) -> bool {
        let i = self.get_mut(inst);
        i.arrived.insert(thread);
        if i.status == InstanceStatus::Running && i.arrived.len() == i.registered.len() {
            i.status = InstanceStatus::Testing;
            true
        } else {
            false
        }
    }

    /// Evaluates every acceptance test against the tentative view; the action
    /// passes only if all do. Objects whose home is down make a test fail.
    pub fn evaluate_tests(&self, store: &ObjectStore, trace: &mut Trace, inst: InstanceId) -> bool {
        let view = |name: &str| -> Option<i64> {
            let home = store.home_of(name).ok()?;
            if !store.is_up(home) {
                return None;
            }
            store.volatile(name).ok()?.value.as_int()
        };
        let def = self.def(inst);
        let mut failed = Vec::new();
        for t in &def.tests {
            if !t.eval(&view) {
                failed.push(t.name.as_str());
            }
        }
        let pass = failed.is_empty();
        let mut d = Detail::new().with("inst", inst).with("pass", u8::from(pass)).with("tests", def.tests.len());
        if !pass {
            d = d.with("failed", failed.join(","));
        }
        trace.push(Kind::TestLine, self.get(inst).bound_txn, None, d);
        pass
    }

    /// Emits one outcome event per participant, all at the current time.
    pub fn record_outcome(&mut self, trace: &mut Trace, inst: InstanceId, outcome: Outcome, cause: Option<AbortCause>) {
        let i = self.get_mut(inst);
        i.status = match outcome {
            Outcome::Committed => InstanceStatus::Committed,
            Outcome::Aborted => InstanceStatus::Aborted,
        };
        i.outcome = Some((outcome, cause));
        let txn = i.bound_txn;
        let parts: Vec<(String, ThreadId)> = i.registered.iter().map(|(r, t)| (r.clone(), *t)).collect();
        for (role, thr) in parts {
            let mut d = Detail::new().with("inst", inst).with("thr", thr).with("role", role).with("result", outcome);
            if let Some(c) = cause {
                d = d.with("cause", c);
            }
            trace.push(Kind::Outcome, txn, None, d);
        }
    }

    /// Backward recovery of `inst` and its open descendants, leaves first.
    ///
    /// `flat_root` is the shared transaction when nested actions run inside
    /// their top-level transaction; rollback is then limited to the regions
    /// of the aborted subtree. Otherwise each instance's own transaction is
    /// aborted. The recovery line is checked against live state and then
    /// reinstated on live nodes.
    pub fn coordinated_abort(
        &mut self,
        store: &mut ObjectStore,
        engine: &mut TxnEngine,
        trace: &mut Trace,
        inst: InstanceId,
        cause: AbortCause,
        flat_root: Option<TransactionId>,
    ) -> AbortReport {
        let mut report = AbortReport::default();
        self.abort_rec(store, engine, trace, inst, cause, flat_root, &mut report);
        report
    }

    #[allow(clippy::too_many_arguments)]
    fn abort_rec(
        &mut self,
        store: &mut ObjectStore,
        engine: &mut TxnEngine,
        trace: &mut Trace,
        inst: InstanceId,
        cause: AbortCause,
        flat_root: Option<TransactionId>,
        report: &mut AbortReport,
    ) {
        if self.get(inst).status.is_terminal() {
            return;
        }
        for c in self.get(inst).children.clone() {
            self.abort_rec(store, engine, trace, c, AbortCause::Parent, flat_root, report);
        }
        let i = self.get(inst);
        // Undo of the whole tree already ran: nested lines are moot.
        let tree_aborted = i.parent.is_some()
            && flat_root
                .or_else(|| i.bound_txn.and_then(|t| engine.root_of(t).ok()))
                .is_some_and(|r| engine.status(r).is_ok_and(|s| s == TxnStatus::Aborted));
        let nested_in_flat = i.parent.is_some() && flat_root.is_some();
        match (nested_in_flat, i.bound_txn) {
            (true, _) => {
                let root = flat_root.expect("flat root");
                let regions: BTreeSet<u64> = self.subtree(inst).iter().map(|i| i.0).collect();
                if engine.status(root).is_ok_and(|s| s == TxnStatus::Active) {
                    let _ = engine.rollback_regions(store, trace, root, &regions);
                }
            }
            (false, Some(t)) => {
                if engine.status(t).is_ok_and(|s| s == TxnStatus::Active) {
                    let _ = engine.abort(store, trace, t);
                }
            }
            (false, None) => {}
        }
        if let Some(snap) = self.get(inst).recovery_line.clone().filter(|_| !tree_aborted) {
            for (name, v) in snap.entries() {
                let live = store.home_of(name).is_ok_and(|h| store.is_up(h));
                if live && store.volatile(name).is_ok_and(|cur| cur.value != v.value) {
                    report.mismatched.push(name.clone());
                }
            }
            let _ = store.restore_snapshot_on_live_nodes(&snap);
        }
        self.record_outcome(trace, inst, Outcome::Aborted, Some(cause));
        report.aborted.push(inst);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ca_action::def::{Role, Step};
    use crate::object_store::{ObjectId, Value};

    fn def(name: &str, roles: &[&str], mode: Mode, nested: &[&str], footprint: &[&str]) -> CAActionDef {
        let mut d = CAActionDef::new(name);
        d.roles = roles.iter().map(|r| Role { name: (*r).into(), body: vec![Step::Exit] }).collect();
        d.mode = mode;
        d.nested = nested.iter().map(|s| (*s).into()).collect();
        d.footprint = footprint.iter().map(|s| (*s).into()).collect();
        d
    }

    fn lib(parent_mode: Mode) -> Library {
        let mut l = Library::new();
        l.insert(def("P", &["a", "b"], parent_mode, &["Pair", "Solo"], &["x"]));
        l.insert(def("Pair", &["p", "q"], Mode::General, &[], &["x"]));
        l.insert(def("Solo", &["s"], Mode::General, &[], &["x"]));
        l
    }

    fn running_parent(m: &mut ActionManager, store: &mut ObjectStore, tr: &mut Trace) -> InstanceId {
        let (p, done) = m.enter(tr, ThreadId(1), "P", "a", None, Some("c"), &Detail::new()).unwrap();
        assert!(!done);
        let (p2, done) = m.enter(tr, ThreadId(2), "P", "b", None, Some("c"), &Detail::new()).unwrap();
        assert!(done);
        assert_eq!(p, p2);
        m.take_recovery_line(store, tr, p).unwrap();
        p
    }

    fn store() -> ObjectStore {
        let mut s = ObjectStore::new();
        s.add_node("n1");
        s.create_object(ObjectId::new("x", "n1"), Value::from_int(1)).unwrap();
        s
    }

    #[test]
    fn gathering_until_all_roles_register() {
        let mut m = ActionManager::new(lib(Mode::General));
        let mut s = store();
        let mut tr = Trace::new();
        let p = running_parent(&mut m, &mut s, &mut tr);
        assert_eq!(m.get(p).status, InstanceStatus::Running);
        assert_eq!(m.get(p).recovery_line.as_ref().unwrap().get("x").unwrap().value, Value::from_int(1));
        assert_eq!(m.enter(&mut tr, ThreadId(3), "P", "a", None, Some("c"), &Detail::new()).map(|r| r.1), Ok(false));
        assert_eq!(
            m.enter(&mut tr, ThreadId(4), "P", "a", None, Some("c"), &Detail::new()),
            Err(EnterError::RoleTaken("a".into()))
        );
    }

    #[test]
    fn outsider_rejected_from_nested() {
        let mut m = ActionManager::new(lib(Mode::General));
        let mut s = store();
        let mut tr = Trace::new();
        let p = running_parent(&mut m, &mut s, &mut tr);
        assert_eq!(m.enter(&mut tr, ThreadId(9), "Pair", "p", Some(p), None, &Detail::new()), Err(EnterError::NotParentParticipant));
        let (n, done) = m.enter(&mut tr, ThreadId(1), "Pair", "p", Some(p), None, &Detail::new()).unwrap();
        assert!(!done);
        assert_eq!(m.enter(&mut tr, ThreadId(2), "Pair", "q", Some(p), None, &Detail::new()), Ok((n, true)));
        assert!(tr.events().iter().any(|e| e.detail.get("rejected") == Some("not_parent_participant")));
    }

    #[test]
    fn mode_rules() {
        for (mode, pair_ok, solo_ok) in
            [(Mode::Flat, false, false), (Mode::NestedSameKind, true, false), (Mode::General, true, true)]
        {
            let mut m = ActionManager::new(lib(mode));
            let mut s = store();
            let mut tr = Trace::new();
            let p = running_parent(&mut m, &mut s, &mut tr);
            let pair = m.enter(&mut tr, ThreadId(1), "Pair", "p", Some(p), None, &Detail::new());
            let solo = m.enter(&mut tr, ThreadId(2), "Solo", "s", Some(p), None, &Detail::new());
            assert_eq!(pair.is_ok(), pair_ok, "{mode:?}");
            assert_eq!(solo.is_ok(), solo_ok, "{mode:?}");
            if !pair_ok {
                assert_eq!(pair, Err(EnterError::ModeViolation));
            }
        }
    }

    #[test]
    fn coordinated_abort_restores_recovery_line_and_is_unanimous() {
        let mut m = ActionManager::new(lib(Mode::General));
        let mut s = store();
        let mut e = TxnEngine::new();
        let mut tr = Trace::new();
        let p = running_parent(&mut m, &mut s, &mut tr);
        let t = e.begin(&mut tr, None).unwrap();
        m.get_mut(p).bound_txn = Some(t);
        e.write(&mut s, &mut tr, t, "x", Value::from_int(50), p.0).unwrap();
        let (n, _) = m.enter(&mut tr, ThreadId(1), "Solo", "s", Some(p), None, &Detail::new()).unwrap();
        let r = m.coordinated_abort(&mut s, &mut e, &mut tr, p, AbortCause::AcceptanceTest, None);
        assert_eq!(r.aborted, vec![n, p]);
        assert!(r.mismatched.is_empty());
        assert_eq!(s.volatile("x").unwrap().value, Value::from_int(1));
        let results: Vec<&str> = tr
            .events()
            .iter()
            .filter(|e| e.kind == Kind::Outcome && e.inst() == Some(p.0))
            .map(|e| e.detail.get("result").unwrap())
            .collect();
        assert_eq!(results, vec!["aborted", "aborted"]);
    }

    #[test]
    fn empty_footprint_abort_changes_nothing() {
        let mut l = Library::new();
        l.insert(def("E", &["r"], Mode::General, &[], &[]));
        let mut m = ActionManager::new(l);
        let mut s = store();
        let before = s.dump_volatile();
        let mut e = TxnEngine::new();
        let mut tr = Trace::new();
        let (i, _) = m.enter(&mut tr, ThreadId(1), "E", "r", None, Some("c"), &Detail::new()).unwrap();
        m.take_recovery_line(&mut s, &mut tr, i).unwrap();
        m.coordinated_abort(&mut s, &mut e, &mut tr, i, AbortCause::AcceptanceTest, None);
        assert_eq!(s.dump_volatile(), before);
    }
}
