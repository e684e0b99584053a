//! Deterministic discrete-event simulator: virtual nodes, clients, logical
//! threads, message delivery and crash injection.
//!
//! One event loop owns the store, the transaction engine and the action
//! manager. The next event is the one with the lowest (time, seeded
//! priority, sequence number), so a run is a pure function of the scenario
//! and the seed.

pub mod scenario;
pub mod sweep;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ca_action::{AbortCause, ActionManager, InstanceId, InstanceStatus, Step, ThreadId};
use crate::mapping::{strategy_select, MappingPlan, Strategy};
use crate::object_store::{NodeId, ObjectId, ObjectStore, Value};
use crate::trace::{Detail, Kind, Trace};
use crate::txn_engine::{Access, InquiryAnswer, LockMode, LockPolicy, Outcome, TransactionId, TxnEngine, TxnError};

pub use scenario::{Client, Config, Fault, FaultKind, ObjectDecl, Scenario, ValidationError};

/// Ticks an in-doubt participant waits before asking its coordinator again.
pub const INQUIRY_RETRY: u64 = 20;

/// Run-time overrides of the scenario configuration.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SimOptions {
    pub seed: Option<u64>,
    pub strategy: Option<Strategy>,
    pub horizon: Option<u64>,
    pub policy: LockPolicy,
    pub crash_point: Option<CrashPoint>,
}

/// An extra crash injected once the trace holds more than `after_events`
/// events, optionally followed by a recovery.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrashPoint {
    pub after_events: usize,
    pub node: NodeId,
    pub recover_after: Option<u64>,
}

/// Checks the simulator makes on live state while the run is in progress.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LiveChecks {
    /// Crashes checked for unchanged stable storage and reset volatile state.
    pub crashes: usize,
    /// Aborts checked against the recovery line.
    pub aborts: usize,
    pub failures: Vec<String>,
}

impl LiveChecks {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceSummary {
    pub id: InstanceId,
    pub action: String,
    pub parent: Option<InstanceId>,
    pub label: Option<String>,
    pub txn: Option<TransactionId>,
    pub strategy: Option<Strategy>,
    pub outcome: Option<(Outcome, Option<AbortCause>)>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub trace: Trace,
    /// Final stable state in the dump format.
    pub dump: String,
    pub live: LiveChecks,
    pub instances: Vec<InstanceSummary>,
}

impl RunResult {
    pub fn trace_file(&self) -> String {
        crate::trace::write_trace_file(&self.trace, &self.dump)
    }
}

/// Validates and runs a scenario.
pub fn run(scenario: &Scenario, opts: &SimOptions) -> Result<RunResult, ValidationError> {
    scenario.validate()?;
    Ok(Sim::new(scenario, opts).run())
}

#[derive(Debug, Clone)]
enum Ev {
    Submit(usize),
    Step { thread: usize, epoch: u64 },
    Deliver(usize),
    EntryDeadline(InstanceId),
    Fault(usize),
    Recover(NodeId),
    InquiryRetry { txn: TransactionId, node: NodeId },
}

#[derive(Debug)]
struct Queued {
    time: u64,
    prio: u32,
    seq: u64,
    ev: Ev,
}

impl Queued {
    fn key(&self) -> (u64, u32, u64) {
        (self.time, self.prio, self.seq)
    }
}

impl PartialEq for Queued {
    fn eq(&self, o: &Self) -> bool {
        self.key() == o.key()
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl Ord for Queued {
    // reversed: BinaryHeap pops the maximum
    fn cmp(&self, o: &Self) -> Ordering {
        o.key().cmp(&self.key())
    }
}

#[derive(Debug, Clone)]
enum Msg {
    OpRequest { tag: u64 },
    OpReply { tag: u64 },
    Prepare { txn: TransactionId },
    Vote { txn: TransactionId, yes: bool },
    Commit { txn: TransactionId },
    Ack { txn: TransactionId },
    Inquire { txn: TransactionId },
    Answer { txn: TransactionId, answer: InquiryAnswer },
}

impl Msg {
    fn name(&self) -> &'static str {
        match self {
            Msg::OpRequest { .. } => "op",
            Msg::OpReply { .. } => "op_reply",
            Msg::Prepare { .. } => "prepare",
            Msg::Vote { .. } => "vote",
            Msg::Commit { .. } => "commit",
            Msg::Ack { .. } => "ack",
            Msg::Inquire { .. } => "inquire",
            Msg::Answer { .. } => "answer",
        }
    }

    fn txn(&self) -> Option<TransactionId> {
        match self {
            Msg::OpRequest { .. } | Msg::OpReply { .. } => None,
            Msg::Prepare { txn }
            | Msg::Vote { txn, .. }
            | Msg::Commit { txn }
            | Msg::Ack { txn }
            | Msg::Inquire { txn }
            | Msg::Answer { txn, .. } => Some(*txn),
        }
    }
}

#[derive(Debug, Clone)]
struct Message {
    from: NodeId,
    to: NodeId,
    msg: Msg,
}

#[derive(Debug, Clone)]
struct Frame {
    inst: InstanceId,
    role: String,
    pc: usize,
    /// Last value read of each object, by name.
    locals: BTreeMap<String, i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Wait {
    None,
    Op,
    Await,
    Start,
    TestLine,
    Gate,
}

#[derive(Debug, Clone)]
struct ThreadState {
    id: ThreadId,
    node: NodeId,
    frames: Vec<Frame>,
    done: bool,
    epoch: u64,
    scheduled: bool,
    wait: Wait,
}

#[derive(Debug, Clone)]
struct PendingOp {
    thread: usize,
    epoch: u64,
    inst: InstanceId,
    txn: TransactionId,
    obj: String,
    write: Option<Value>,
    step: usize,
    from: NodeId,
    home: NodeId,
    result: Option<Value>,
}

#[derive(Debug, Clone)]
struct CommitState {
    inst: InstanceId,
    coordinator: NodeId,
    participants: Vec<NodeId>,
    votes: BTreeSet<NodeId>,
    decided: bool,
}

struct Sim<'a> {
    sc: &'a Scenario,
    strategy: Option<Strategy>,
    horizon: u64,
    crash_point: Option<CrashPoint>,
    store: ObjectStore,
    engine: TxnEngine,
    mgr: ActionManager,
    trace: Trace,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Queued>,
    next_seq: u64,
    now: u64,
    threads: Vec<ThreadState>,
    plans: BTreeMap<InstanceId, MappingPlan>,
    txn_inst: BTreeMap<TransactionId, InstanceId>,
    admitted: BTreeSet<InstanceId>,
    pending: BTreeMap<u64, PendingOp>,
    entry_locks: BTreeMap<u64, InstanceId>,
    entry_waiting: BTreeMap<InstanceId, BTreeSet<u64>>,
    next_tag: u64,
    msgs: Vec<Message>,
    channels: BTreeMap<(NodeId, NodeId), u64>,
    commits: BTreeMap<TransactionId, CommitState>,
    live: LiveChecks,
}

impl<'a> Sim<'a> {
    fn new(sc: &'a Scenario, opts: &SimOptions) -> Self {
        let seed = opts.seed.unwrap_or(sc.config.seed);
        let mut engine = TxnEngine::with_policy(opts.policy);
        if let Some(n) = sc.nodes.first() {
            engine.set_default_node(n.clone());
        }
        let threads = sc
            .clients
            .iter()
            .enumerate()
            .map(|(i, c)| ThreadState {
                id: ThreadId(i as u64 + 1),
                node: c.node.clone(),
                frames: Vec::new(),
                done: false,
                epoch: 0,
                scheduled: false,
                wait: Wait::None,
            })
            .collect();
        Sim {
            sc,
            strategy: opts.strategy.or(sc.config.strategy),
            horizon: opts.horizon.unwrap_or(sc.config.horizon),
            crash_point: opts.crash_point.clone(),
            store: ObjectStore::new(),
            engine,
            mgr: ActionManager::new(sc.library.clone()),
            trace: Trace::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: BinaryHeap::new(),
            next_seq: 0,
            now: 0,
            threads,
            plans: BTreeMap::new(),
            txn_inst: BTreeMap::new(),
            admitted: BTreeSet::new(),
            pending: BTreeMap::new(),
            entry_locks: BTreeMap::new(),
            entry_waiting: BTreeMap::new(),
            next_tag: 0,
            msgs: Vec::new(),
            channels: BTreeMap::new(),
            commits: BTreeMap::new(),
            live: LiveChecks::default(),
        }
    }

    fn schedule(&mut self, time: u64, ev: Ev) {
        let prio = self.rng.random::<u32>();
        self.next_seq += 1;
        self.queue.push(Queued { time, prio, seq: self.next_seq, ev });
    }

    fn tag(&mut self) -> u64 {
        self.next_tag += 1;
        self.next_tag
    }

    fn run(mut self) -> RunResult {
        for n in &self.sc.nodes {
            self.store.add_node(n.clone());
        }
        for o in &self.sc.objects {
            let v = Value::from_int(o.initial);
            self.store.create_object(ObjectId::new(o.name.clone(), o.home.clone()), v.clone()).expect("validated object");
            let d = Detail::new().with("node", &o.home).with("val", v.to_hex()).with("ver", 0);
            self.trace.push(Kind::Create, None, Some(&o.name), d);
        }
        for (i, c) in self.sc.clients.iter().enumerate() {
            self.schedule(c.time, Ev::Submit(i));
        }
        for (i, f) in self.sc.faults.iter().enumerate() {
            self.schedule(f.time, Ev::Fault(i));
        }
        self.check_crash_point();
        loop {
            let Some(next) = self.queue.peek() else {
                if self.quiesce() {
                    continue;
                }
                break;
            };
            if next.time > self.horizon {
                self.horizon_abort();
                break;
            }
            let q = self.queue.pop().expect("peeked");
            self.now = q.time;
            self.trace.set_time(q.time);
            self.handle(q.ev);
            self.drain_engine();
            self.check_crash_point();
        }
        let instances = self
            .mgr
            .instances()
            .map(|i| InstanceSummary {
                id: i.id,
                action: i.action.clone(),
                parent: i.parent,
                label: i.label.clone(),
                txn: i.bound_txn,
                strategy: self.plans.get(&self.mgr.root_of(i.id)).map(|p| p.strategy),
                outcome: i.outcome,
            })
            .collect();
        RunResult { dump: self.store.dump_stable(), trace: self.trace, live: self.live, instances }
    }

    fn check_crash_point(&mut self) {
        let fire = self.crash_point.as_ref().is_some_and(|cp| self.trace.len() > cp.after_events);
        if fire {
            let cp = self.crash_point.take().expect("checked");
            if self.store.is_up(&cp.node) {
                self.crash(&cp.node);
                if let Some(d) = cp.recover_after {
                    self.schedule(self.now + d, Ev::Recover(cp.node));
                }
                self.drain_engine();
            }
        }
    }

    /// Aborts open leaf instances once nothing else can happen. Returns
    /// false when there is nothing left to abort.
    fn quiesce(&mut self) -> bool {
        let open: Vec<InstanceId> = self
            .mgr
            .instances()
            .filter(|i| i.status.is_open())
            .filter(|i| i.children.iter().all(|c| !self.mgr.get(*c).status.is_open()))
            .map(|i| i.id)
            .collect();
        if open.is_empty() {
            return false;
        }
        for i in open {
            self.abort_instance(i, AbortCause::UnmatchedAwait);
        }
        self.drain_engine();
        true
    }

    fn horizon_abort(&mut self) {
        let roots: Vec<InstanceId> =
            self.mgr.instances().filter(|i| i.parent.is_none() && i.status.is_open()).map(|i| i.id).collect();
        self.now = self.now.max(self.horizon);
        self.trace.set_time(self.now);
        for r in roots {
            self.abort_instance(r, AbortCause::Horizon);
        }
        self.drain_engine();
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Submit(i) => self.submit(i),
            Ev::Step { thread, epoch } => {
                let th = &mut self.threads[thread];
                if th.epoch == epoch && th.scheduled && !th.done {
                    th.scheduled = false;
                    self.step(thread);
                }
            }
            Ev::Deliver(id) => self.deliver(id),
            Ev::EntryDeadline(inst) => {
                if self.mgr.get(inst).status == InstanceStatus::Gathering {
                    self.abort_instance(inst, AbortCause::EntryTimeout);
                }
            }
            Ev::Fault(i) => {
                let f = &self.sc.faults[i];
                let node = f.node.clone();
                match f.kind {
                    FaultKind::Crash => self.crash(&node),
                    FaultKind::Recover => self.recover(&node),
                }
            }
            Ev::Recover(node) => self.recover(&node),
            Ev::InquiryRetry { txn, node } => {
                if self.store.is_up(&node) && TxnEngine::has_unresolved_prepare(&self.store, &node, txn) {
                    let coord = self.engine.coordinator(txn).cloned();
                    if let Some(c) = coord {
                        self.inquire(txn, &node, &c);
                    }
                }
            }
        }
    }

    // ---- threads -------------------------------------------------------

    fn schedule_step(&mut self, t: usize) {
        let th = &mut self.threads[t];
        if th.done || th.scheduled {
            return;
        }
        th.scheduled = true;
        th.wait = Wait::None;
        let epoch = th.epoch;
        self.schedule(self.now + 1, Ev::Step { thread: t, epoch });
    }

    fn advance(&mut self, t: usize) {
        if let Some(f) = self.threads[t].frames.last_mut() {
            f.pc += 1;
        }
        self.schedule_step(t);
    }

    fn thread_index(&self, id: ThreadId) -> usize {
        id.0 as usize - 1
    }

    fn submit(&mut self, ci: usize) {
        let c = &self.sc.clients[ci];
        let tid = self.threads[ci].id;
        let d = Detail::new()
            .with("thr", tid)
            .with("label", &c.label)
            .with("action", &c.action)
            .with("role", &c.role)
            .with("node", &c.node);
        self.trace.push(Kind::Submit, None, None, d);
        if !self.store.is_up(&c.node) {
            self.trace.push(Kind::Drop, None, None, Detail::new().with("thr", tid).with("node", &c.node).flag("submit"));
            self.threads[ci].done = true;
            return;
        }
        let parent = match &c.within {
            None => None,
            Some(w) => match self.mgr.current_for_label(w) {
                Some(p) => Some(p),
                None => {
                    let d = Detail::new()
                        .with("action", &c.action)
                        .with("role", &c.role)
                        .with("thr", tid)
                        .with("rejected", "parent_not_running");
                    self.trace.push(Kind::Register, None, None, d);
                    self.threads[ci].done = true;
                    return;
                }
            },
        };
        let label = if parent.is_none() { Some(c.label.as_str()) } else { None };
        match self.mgr.enter(&mut self.trace, tid, &c.action, &c.role, parent, label, &Detail::new()) {
            Ok((inst, complete)) => self.registered(ci, inst, c.role.clone(), complete),
            Err(_) => self.threads[ci].done = true,
        }
    }

    fn registered(&mut self, t: usize, inst: InstanceId, role: String, complete: bool) {
        let th = &mut self.threads[t];
        th.frames.push(Frame { inst, role, pc: 0, locals: BTreeMap::new() });
        th.wait = Wait::Start;
        if self.mgr.get(inst).registered.len() == 1 {
            self.mgr.set_deadline(inst, self.now);
            let d = self.mgr.get(inst).entry_deadline;
            self.schedule(d, Ev::EntryDeadline(inst));
        }
        if complete {
            self.try_start(inst);
        }
    }

    fn step_detail(&self, t: usize) -> Detail {
        let f = self.threads[t].frames.last().expect("running thread has a frame");
        Detail::new().with("thr", self.threads[t].id).with("inst", f.inst).with("step", f.pc)
    }

    fn step(&mut self, t: usize) {
        let Some(frame) = self.threads[t].frames.last() else { return };
        let inst = frame.inst;
        if self.mgr.get(inst).status != InstanceStatus::Running {
            return;
        }
        let tid = self.threads[t].id;
        let pc = frame.pc;
        let body = &self.mgr.def(inst).role(&frame.role).expect("registered role").body;
        let step = body.get(pc).cloned();
        let body_len = body.len();
        let txn = self.mgr.get(inst).bound_txn;
        match step {
            None => {
                self.threads[t].wait = Wait::TestLine;
                if self.mgr.arrive(inst, tid) {
                    self.test_line(inst);
                }
            }
            Some(Step::Read(obj)) => self.issue_op(t, obj, None),
            Some(Step::Write(obj, e)) => {
                let v = e.eval(&|n| frame.locals.get(n).copied());
                match v {
                    Some(v) => self.issue_op(t, obj, Some(Value::from_int(v))),
                    None => self.abort_instance(inst, AbortCause::Evaluation),
                }
            }
            Some(Step::Emit(sig)) => {
                let d = Detail::new().with("step", pc);
                self.mgr.emit(&mut self.trace, inst, tid, &sig, &d);
                self.advance(t);
                self.wake_awaiters(inst);
            }
            Some(Step::Await(sig)) => {
                let d = Detail::new().with("step", pc);
                if self.mgr.try_await(&mut self.trace, inst, tid, &sig, &d) {
                    self.advance(t);
                } else {
                    self.threads[t].wait = Wait::Await;
                }
            }
            Some(Step::Enter { action, role }) => {
                let d = self.step_detail(t).with("op", "enter").with("action", &action);
                self.trace.push(Kind::Step, txn, None, d);
                let extra = Detail::new().with("step", pc);
                match self.mgr.enter(&mut self.trace, tid, &action, &role, Some(inst), None, &extra) {
                    Ok((child, complete)) => self.registered(t, child, role, complete),
                    Err(_) => self.advance(t),
                }
            }
            Some(Step::Exit) => {
                let d = self.step_detail(t).with("op", "exit");
                self.trace.push(Kind::Step, txn, None, d);
                if let Some(f) = self.threads[t].frames.last_mut() {
                    f.pc = body_len;
                }
                self.schedule_step(t);
            }
        }
    }

    fn wake_awaiters(&mut self, inst: InstanceId) {
        for t in 0..self.threads.len() {
            let th = &self.threads[t];
            if th.wait == Wait::Await && th.frames.last().is_some_and(|f| f.inst == inst) {
                self.schedule_step(t);
            }
        }
    }

    /// Threads blocked on a gate and instances waiting to start get another
    /// chance after anything that could have unblocked them.
    fn wake_blocked(&mut self) {
        for t in 0..self.threads.len() {
            if self.threads[t].wait == Wait::Gate {
                self.schedule_step(t);
            }
        }
        let starting: Vec<InstanceId> = self
            .mgr
            .instances()
            .filter(|i| i.status == InstanceStatus::Starting && !self.admitted.contains(&i.id))
            .map(|i| i.id)
            .collect();
        for i in starting {
            self.try_start(i);
        }
    }

    /// True when an active instance of the same tree, other than `inst` and
    /// its ancestors, covers `obj`.
    fn gated(&self, inst: InstanceId, obj: &str) -> bool {
        let root = self.mgr.root_of(inst);
        self.admitted.iter().any(|j| {
            let ji = self.mgr.get(*j);
            !ji.status.is_terminal()
                && self.mgr.root_of(*j) == root
                && !self.mgr.is_ancestor_or_self(*j, inst)
                && self.mgr.def(*j).footprint.contains(obj)
        })
    }

    fn issue_op(&mut self, t: usize, obj: String, write: Option<Value>) {
        let frame = self.threads[t].frames.last().expect("running thread has a frame");
        let (inst, pc) = (frame.inst, frame.pc);
        if self.gated(inst, &obj) {
            self.threads[t].wait = Wait::Gate;
            return;
        }
        let txn = self.mgr.get(inst).bound_txn.expect("running instance is bound");
        let home = self.store.home_of(&obj).expect("validated object").clone();
        let from = self.threads[t].node.clone();
        let tag = self.tag();
        let op = PendingOp {
            thread: t,
            epoch: self.threads[t].epoch,
            inst,
            txn,
            obj,
            write,
            step: pc,
            from: from.clone(),
            home: home.clone(),
            result: None,
        };
        self.pending.insert(tag, op);
        self.threads[t].wait = Wait::Op;
        if home == from {
            self.execute_op(tag);
        } else {
            self.send(from, home, Msg::OpRequest { tag });
        }
    }

    fn op_is_live(&self, p: &PendingOp) -> bool {
        let th = &self.threads[p.thread];
        !th.done && th.epoch == p.epoch
    }

    /// Runs a pending operation at the object's home.
    fn execute_op(&mut self, tag: u64) {
        let Some(p) = self.pending.get(&tag).cloned() else { return };
        if !self.op_is_live(&p) {
            self.pending.remove(&tag);
            return;
        }
        let extra = Detail::new().with("inst", p.inst).with("thr", self.threads[p.thread].id).with("step", p.step);
        let r = match &p.write {
            None => self
                .engine
                .read_tagged(&self.store, &mut self.trace, p.txn, &p.obj, tag, &extra)
                .map(|a| match a {
                    Access::Done(v) => Access::Done(Some(v)),
                    Access::Queued => Access::Queued,
                }),
            Some(v) => self
                .engine
                .write_tagged(&mut self.store, &mut self.trace, p.txn, &p.obj, v.clone(), p.inst.0, tag, &extra)
                .map(|a| match a {
                    Access::Done(()) => Access::Done(None),
                    Access::Queued => Access::Queued,
                }),
        };
        match r {
            Ok(Access::Done(v)) => {
                if let Some(op) = self.pending.get_mut(&tag) {
                    op.result = v;
                }
                if p.home == p.from {
                    self.finish_op(tag);
                } else {
                    self.send(p.home, p.from, Msg::OpReply { tag });
                }
            }
            Ok(Access::Queued) => {}
            Err(TxnError::DeadlockVictim(..)) => {
                self.pending.remove(&tag);
                self.abort_instance(p.inst, AbortCause::Deadlock);
            }
            Err(TxnError::Store(_)) => {
                self.pending.remove(&tag);
                self.abort_instance(p.inst, AbortCause::Crash);
            }
            Err(_) => {
                self.pending.remove(&tag);
            }
        }
    }

    /// The reply reached the thread.
    fn finish_op(&mut self, tag: u64) {
        let Some(p) = self.pending.remove(&tag) else { return };
        if !self.op_is_live(&p) {
            return;
        }
        if p.write.is_none() {
            let v = p.result.as_ref().and_then(Value::as_int);
            if let (Some(v), Some(f)) = (v, self.threads[p.thread].frames.last_mut()) {
                f.locals.insert(p.obj.clone(), v);
            }
        }
        self.advance(p.thread);
        self.wake_blocked();
    }

    // ---- instances -----------------------------------------------------

    fn try_start(&mut self, inst: InstanceId) {
        let i = self.mgr.get(inst);
        if i.status != InstanceStatus::Starting || self.admitted.contains(&inst) {
            return;
        }
        if let Some(parent) = i.parent {
            let preds: Vec<String> = self.mgr.def(parent).predecessors(&i.action).map(str::to_owned).collect();
            let siblings: Vec<InstanceId> = self.mgr.get(parent).children.clone();
            for a in preds {
                let of_a: Vec<InstanceStatus> =
                    siblings.iter().map(|s| self.mgr.get(*s)).filter(|s| s.action == a).map(|s| s.status).collect();
                if !of_a.iter().any(|s| s.is_terminal()) || of_a.iter().any(|s| !s.is_terminal()) {
                    return;
                }
            }
            let fp = &self.mgr.def(inst).footprint;
            if fp.iter().any(|o| self.gated(inst, o)) {
                return;
            }
            let root = self.mgr.root_of(inst);
            if self.pending.values().any(|p| fp.contains(&p.obj) && self.mgr.root_of(p.inst) == root) {
                return;
            }
        }
        self.admitted.insert(inst);
        let bound = match i.parent {
            None => {
                let def = self.mgr.def(inst);
                let first = &def.roles[0].name;
                let coord = self.threads[self.thread_index(i.registered[first])].node.clone();
                let mut plan = MappingPlan::new(strategy_select(def, self.strategy));
                let r = plan.bind_top(&mut self.engine, &mut self.trace, inst, coord);
                self.plans.insert(inst, plan);
                r
            }
            Some(parent) => {
                let root = self.mgr.root_of(inst);
                let plan = self.plans.get_mut(&root).expect("root bound before nested start");
                plan.bind_nested(&mut self.engine, &mut self.trace, inst, parent)
            }
        };
        let txn = match bound {
            Ok(t) => t,
            Err(_) => {
                self.abort_instance(inst, AbortCause::Crash);
                return;
            }
        };
        self.mgr.get_mut(inst).bound_txn = Some(txn);
        self.txn_inst.entry(txn).or_insert(inst);
        let footprint: Vec<String> = self.mgr.def(inst).footprint.iter().cloned().collect();
        let mut waiting = BTreeSet::new();
        for obj in footprint {
            let tag = self.tag();
            match self.engine.acquire(&self.store, &mut self.trace, txn, &obj, LockMode::Read, tag) {
                Ok(Access::Done(())) => {}
                Ok(Access::Queued) => {
                    self.entry_locks.insert(tag, inst);
                    waiting.insert(tag);
                }
                Err(e) => {
                    self.engine.cancel_requests(&waiting);
                    for w in &waiting {
                        self.entry_locks.remove(w);
                    }
                    let cause = if matches!(e, TxnError::DeadlockVictim(..)) { AbortCause::Deadlock } else { AbortCause::Crash };
                    self.abort_instance(inst, cause);
                    return;
                }
            }
        }
        if waiting.is_empty() {
            self.run_instance(inst);
        } else {
            self.entry_waiting.insert(inst, waiting);
        }
    }

    fn run_instance(&mut self, inst: InstanceId) {
        if self.mgr.take_recovery_line(&mut self.store, &mut self.trace, inst).is_err() {
            self.abort_instance(inst, AbortCause::Crash);
            return;
        }
        let parts: Vec<ThreadId> = self.mgr.get(inst).participants().collect();
        for p in parts {
            let t = self.thread_index(p);
            self.schedule_step(t);
        }
    }

    fn test_line(&mut self, inst: InstanceId) {
        let def = self.mgr.def(inst);
        let homes_down = def.footprint.iter().any(|o| self.store.home_of(o).is_ok_and(|h| !self.store.is_up(h)));
        if homes_down {
            self.abort_instance(inst, AbortCause::Crash);
            return;
        }
        if !self.mgr.evaluate_tests(&self.store, &mut self.trace, inst) {
            self.abort_instance(inst, AbortCause::AcceptanceTest);
            return;
        }
        let txn = self.mgr.get(inst).bound_txn.expect("running instance is bound");
        if self.mgr.get(inst).parent.is_some() {
            let root = self.mgr.root_of(inst);
            if self.plans[&root].strategy == Strategy::Nested
                && self.engine.commit(&mut self.store, &mut self.trace, txn).is_err()
            {
                self.abort_instance(inst, AbortCause::Crash);
                return;
            }
            self.mgr.record_outcome(&mut self.trace, inst, Outcome::Committed, None);
            self.leave(inst);
            self.wake_blocked();
            return;
        }
        self.mgr.get_mut(inst).status = InstanceStatus::Committing;
        let participants = match self.engine.begin_top_commit(&self.store, txn) {
            Ok(p) => p,
            Err(_) => {
                self.abort_instance(inst, AbortCause::Crash);
                return;
            }
        };
        let coordinator = self.engine.coordinator(txn).expect("top-level").clone();
        self.commits.insert(
            txn,
            CommitState { inst, coordinator: coordinator.clone(), participants: participants.clone(), votes: BTreeSet::new(), decided: false },
        );
        if participants.is_empty() {
            self.decide(txn);
            return;
        }
        for p in participants {
            if !self.commits.contains_key(&txn) {
                break;
            }
            if p == coordinator {
                let yes = self.engine.prepare_at(&mut self.store, &mut self.trace, txn, &p).unwrap_or(false);
                self.vote(txn, p, yes);
            } else {
                self.send(coordinator.clone(), p, Msg::Prepare { txn });
            }
        }
    }

    /// Participants of a committed nested instance return to the parent.
    fn leave(&mut self, inst: InstanceId) {
        let parts: Vec<ThreadId> = self.mgr.get(inst).participants().collect();
        for p in parts {
            let t = self.thread_index(p);
            let th = &mut self.threads[t];
            if let Some(pos) = th.frames.iter().position(|f| f.inst == inst) {
                th.frames.truncate(pos);
                th.epoch += 1;
                th.scheduled = false;
                if th.frames.is_empty() {
                    th.done = true;
                } else {
                    self.advance(t);
                }
            }
        }
    }

    fn vote(&mut self, txn: TransactionId, node: NodeId, yes: bool) {
        let Some(c) = self.commits.get_mut(&txn) else { return };
        if c.decided {
            return;
        }
        if !yes {
            let inst = c.inst;
            self.abort_instance(inst, AbortCause::Crash);
            return;
        }
        c.votes.insert(node);
        if c.participants.iter().all(|p| c.votes.contains(p)) {
            self.decide(txn);
        }
    }

    fn decide(&mut self, txn: TransactionId) {
        let c = self.commits.get_mut(&txn).expect("commit state");
        c.decided = true;
        let (inst, coordinator, participants) = (c.inst, c.coordinator.clone(), c.participants.clone());
        if self.engine.decide_commit(&mut self.store, &mut self.trace, txn).is_err() {
            self.commits.remove(&txn);
            self.abort_instance(inst, AbortCause::Crash);
            return;
        }
        self.mgr.record_outcome(&mut self.trace, inst, Outcome::Committed, None);
        let parts: Vec<ThreadId> = self.mgr.get(inst).participants().collect();
        for p in parts {
            let t = self.thread_index(p);
            let th = &mut self.threads[t];
            th.frames.clear();
            th.done = true;
            th.epoch += 1;
        }
        self.wake_blocked();
        for p in participants {
            if p == coordinator {
                self.apply_at(txn, &p);
            } else {
                self.send(coordinator.clone(), p, Msg::Commit { txn });
            }
        }
    }

    /// Phase two at `node`, acknowledged to the coordinator.
    fn apply_at(&mut self, txn: TransactionId, node: &NodeId) {
        if let Ok(true) = self.engine.apply_at(&mut self.store, &mut self.trace, txn, node) {
            let coord = self.engine.coordinator(txn).expect("top-level").clone();
            if &coord == node {
                let _ = self.engine.record_ack(&mut self.store, txn, node);
            } else {
                self.send(node.clone(), coord, Msg::Ack { txn });
            }
        }
    }

    fn inquire(&mut self, txn: TransactionId, node: &NodeId, coord: &NodeId) {
        if node == coord {
            let answer = self.engine.answer_inquiry(&self.store, coord, txn);
            self.answer(txn, node, answer);
        } else {
            self.send(node.clone(), coord.clone(), Msg::Inquire { txn });
        }
    }

    fn answer(&mut self, txn: TransactionId, node: &NodeId, answer: InquiryAnswer) {
        match answer {
            InquiryAnswer::Commit => self.apply_at(txn, node),
            InquiryAnswer::Abort => {
                let _ = self.engine.resolve_abort_at(&mut self.store, &mut self.trace, txn, node);
            }
            InquiryAnswer::Wait => self.schedule(self.now + INQUIRY_RETRY, Ev::InquiryRetry { txn, node: node.clone() }),
        }
    }

    fn abort_instance(&mut self, inst: InstanceId, cause: AbortCause) {
        if self.mgr.get(inst).status.is_terminal() {
            return;
        }
        let root = self.mgr.root_of(inst);
        let flat = self.plans.get(&root).and_then(MappingPlan::flat_root);
        let report = self.mgr.coordinated_abort(&mut self.store, &mut self.engine, &mut self.trace, inst, cause, flat);
        self.live.aborts += 1;
        if !report.mismatched.is_empty() {
            self.live.failures.push(format!(
                "t={}: instance {inst} left {} off its recovery line",
                self.now,
                report.mismatched.join(",")
            ));
        }
        let aborted: BTreeSet<InstanceId> = report.aborted.iter().copied().collect();
        let mut tags = BTreeSet::new();
        self.pending.retain(|tag, p| {
            let hit = aborted.contains(&p.inst);
            if hit {
                tags.insert(*tag);
            }
            !hit
        });
        for a in &report.aborted {
            if let Some(w) = self.entry_waiting.remove(a) {
                for tag in w {
                    self.entry_locks.remove(&tag);
                    tags.insert(tag);
                }
            }
            if let Some(t) = self.mgr.get(*a).bound_txn {
                if self.commits.get(&t).is_some_and(|c| c.inst == *a) {
                    self.commits.remove(&t);
                }
            }
        }
        self.engine.cancel_requests(&tags);
        let mut escalate = Vec::new();
        for a in &report.aborted {
            let parent = self.mgr.get(*a).parent;
            let esc = self.mgr.def(*a).escalate;
            let parts: Vec<ThreadId> = self.mgr.get(*a).participants().collect();
            for p in parts {
                let t = self.thread_index(p);
                let th = &mut self.threads[t];
                let Some(pos) = th.frames.iter().position(|f| f.inst == *a) else { continue };
                th.frames.truncate(pos);
                th.epoch += 1;
                th.scheduled = false;
                if th.frames.is_empty() {
                    th.done = true;
                    continue;
                }
                match parent {
                    Some(pi) if aborted.contains(&pi) => {}
                    Some(pi) if esc => escalate.push(pi),
                    _ => self.advance(t),
                }
            }
        }
        escalate.dedup();
        for p in escalate {
            self.abort_instance(p, AbortCause::Escalated);
        }
        self.wake_blocked();
    }

    /// Processes grants, arbitration losses and cancellations the engine
    /// reported, until it has nothing more to say.
    fn drain_engine(&mut self) {
        loop {
            let grants = self.engine.take_grants();
            let victims = self.engine.take_victims();
            let cancelled = self.engine.take_cancelled();
            if grants.is_empty() && victims.is_empty() && cancelled.is_empty() {
                break;
            }
            for tag in cancelled {
                self.pending.remove(&tag);
                if let Some(i) = self.entry_locks.remove(&tag) {
                    if let Some(w) = self.entry_waiting.get_mut(&i) {
                        w.remove(&tag);
                    }
                }
            }
            for g in grants {
                if self.pending.contains_key(&g.tag) {
                    self.execute_op(g.tag);
                } else if let Some(i) = self.entry_locks.remove(&g.tag) {
                    let done = self.entry_waiting.get_mut(&i).is_some_and(|w| {
                        w.remove(&g.tag);
                        w.is_empty()
                    });
                    if done {
                        self.entry_waiting.remove(&i);
                        if self.mgr.get(i).status == InstanceStatus::Starting {
                            self.run_instance(i);
                        }
                    }
                }
            }
            for v in victims {
                if let Some(p) = self.pending.remove(&v.tag) {
                    self.abort_instance(p.inst, AbortCause::Deadlock);
                } else if let Some(i) = self.entry_locks.remove(&v.tag) {
                    self.abort_instance(i, AbortCause::Deadlock);
                }
            }
        }
    }

    // ---- network and faults --------------------------------------------

    fn send(&mut self, from: NodeId, to: NodeId, msg: Msg) {
        let id = self.msgs.len();
        let mut d = Detail::new().with("msg", id).with("from", &from).with("to", &to).with("type", msg.name());
        if let Msg::OpRequest { tag } | Msg::OpReply { tag } = &msg {
            d = d.with("tag", tag);
        }
        self.trace.push(Kind::MsgSend, msg.txn(), None, d);
        let (lo, hi) = self.sc.config.latency;
        let lat = self.rng.random_range(lo..=hi);
        let key = (from.clone(), to.clone());
        let at = (self.now + lat).max(self.channels.get(&key).map_or(0, |t| t + 1));
        self.channels.insert(key, at);
        self.msgs.push(Message { from, to, msg });
        self.schedule(at, Ev::Deliver(id));
    }

    fn deliver(&mut self, id: usize) {
        let Message { from, to, msg } = self.msgs[id].clone();
        let d = Detail::new().with("msg", id).with("from", &from).with("to", &to).with("type", msg.name());
        if !self.store.is_up(&to) {
            self.trace.push(Kind::Drop, msg.txn(), None, d);
            self.dropped(&from, &to, msg);
            return;
        }
        self.trace.push(Kind::MsgRecv, msg.txn(), None, d);
        match msg {
            Msg::OpRequest { tag } => self.execute_op(tag),
            Msg::OpReply { tag } => self.finish_op(tag),
            Msg::Prepare { txn } => {
                let yes = self.engine.prepare_at(&mut self.store, &mut self.trace, txn, &to).unwrap_or(false);
                self.send(to, from, Msg::Vote { txn, yes });
            }
            Msg::Vote { txn, yes } => self.vote(txn, from, yes),
            Msg::Commit { txn } => self.apply_at(txn, &to),
            Msg::Ack { txn } => {
                let _ = self.engine.record_ack(&mut self.store, txn, &from);
            }
            Msg::Inquire { txn } => {
                let answer = self.engine.answer_inquiry(&self.store, &to, txn);
                self.send(to, from, Msg::Answer { txn, answer });
            }
            Msg::Answer { txn, answer } => self.answer(txn, &to, answer),
        }
    }

    /// The sender learns that the destination was down.
    fn dropped(&mut self, from: &NodeId, to: &NodeId, msg: Msg) {
        if !self.store.is_up(from) {
            return;
        }
        match msg {
            Msg::OpRequest { tag } => {
                if let Some(p) = self.pending.remove(&tag) {
                    self.abort_instance(p.inst, AbortCause::Crash);
                }
            }
            Msg::OpReply { tag } => {
                self.pending.remove(&tag);
            }
            Msg::Prepare { txn } => self.vote(txn, to.clone(), false),
            Msg::Inquire { txn } => self.schedule(self.now + INQUIRY_RETRY, Ev::InquiryRetry { txn, node: from.clone() }),
            Msg::Vote { .. } | Msg::Commit { .. } | Msg::Ack { .. } | Msg::Answer { .. } => {}
        }
    }

    fn crash(&mut self, node: &NodeId) {
        if !self.store.is_up(node) {
            return;
        }
        let before = self.store.stable_image();
        self.trace.push(Kind::Crash, None, None, Detail::new().with("node", node));
        self.store.crash_node(node).expect("node is up");
        self.live.crashes += 1;
        if self.store.stable_image() != before {
            self.live.failures.push(format!("t={}: crash of {node} changed stable storage", self.now));
        }
        if self.store.volatile_len(node) != 0 {
            self.live.failures.push(format!("t={}: crash of {node} left volatile state", self.now));
        }
        let effects = self.engine.on_crash(&mut self.store, &mut self.trace, node);
        for root in effects.aborted_roots {
            if let Some(i) = self.txn_inst.get(&root).copied() {
                self.abort_instance(i, AbortCause::Crash);
            }
        }
        for tag in effects.failed_requests {
            if let Some(p) = self.pending.remove(&tag) {
                self.abort_instance(p.inst, AbortCause::Crash);
            } else if let Some(i) = self.entry_locks.remove(&tag) {
                self.abort_instance(i, AbortCause::Crash);
            }
        }
        for t in 0..self.threads.len() {
            if self.threads[t].done || &self.threads[t].node != node {
                continue;
            }
            if let Some(top) = self.threads[t].frames.first().map(|f| f.inst) {
                if self.mgr.get(top).status.is_open() {
                    self.abort_instance(top, AbortCause::Crash);
                }
            }
            let th = &mut self.threads[t];
            th.done = true;
            th.epoch += 1;
            th.scheduled = false;
        }
        self.wake_blocked();
    }

    fn recover(&mut self, node: &NodeId) {
        if self.store.is_up(node) {
            return;
        }
        self.store.recover_node(node).expect("node is down");
        self.trace.push(Kind::Recover, None, None, Detail::new().with("node", node));
        let effects = self.engine.on_recover(&self.store, &mut self.trace, node);
        for (txn, coord) in effects.in_doubt {
            self.inquire(txn, node, &coord);
        }
        for (txn, parts) in effects.resend {
            for p in parts {
                if &p == node {
                    self.apply_at(txn, &p);
                } else {
                    self.send(node.clone(), p, Msg::Commit { txn });
                }
            }
        }
    }
}
