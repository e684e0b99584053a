use super::*;
use crate::object_store::ObjectId;

fn setup() -> (ObjectStore, TxnEngine, Trace) {
    let mut store = ObjectStore::new();
    for n in ["n1", "n2", "n3"] {
        store.add_node(n);
    }
    store.create_object(ObjectId::new("x", "n1"), Value::from_int(0)).unwrap();
    store.create_object(ObjectId::new("y", "n2"), Value::from_int(10)).unwrap();
    store.create_object(ObjectId::new("z", "n3"), Value::from_int(20)).unwrap();
    let mut engine = TxnEngine::new();
    engine.set_default_node("n1".into());
    (store, engine, Trace::new())
}

fn v(n: i64) -> Value {
    Value::from_int(n)
}

#[test]
fn begin_builds_tree_and_rejects_terminal_parent() {
    let (mut store, mut e, mut tr) = setup();
    let t = e.begin(&mut tr, None).unwrap();
    assert_eq!(e.txn(t).unwrap().parent, None);
    let c = e.begin(&mut tr, Some(t)).unwrap();
    assert_eq!(e.txn(c).unwrap().parent, Some(t));
    assert!(c > t);
    e.commit(&mut store, &mut tr, c).unwrap();
    e.commit(&mut store, &mut tr, t).unwrap();
    assert_eq!(e.begin(&mut tr, Some(t)).unwrap_err(), TxnError::ParentNotActive(t));
}

#[test]
fn read_own_write_and_committed_visibility() {
    let (mut store, mut e, mut tr) = setup();
    let t1 = e.begin(&mut tr, None).unwrap();
    e.write(&mut store, &mut tr, t1, "x", v(5), 0).unwrap();
    assert_eq!(e.read(&store, &mut tr, t1, "x", 0).unwrap(), Access::Done(v(5)));
    e.write(&mut store, &mut tr, t1, "x", v(7), 0).unwrap();
    assert_eq!(e.commit(&mut store, &mut tr, t1).unwrap(), Outcome::Committed);
    let t2 = e.begin(&mut tr, None).unwrap();
    assert_eq!(e.read(&store, &mut tr, t2, "x", 0).unwrap(), Access::Done(v(7)));
}

#[test]
fn unknown_object_and_node_down() {
    let (mut store, mut e, mut tr) = setup();
    let t = e.begin(&mut tr, None).unwrap();
    assert!(matches!(e.read(&store, &mut tr, t, "nope", 0), Err(TxnError::Store(StoreError::UnknownObject(_)))));
    store.crash_node(&"n2".into()).unwrap();
    assert!(matches!(e.write(&mut store, &mut tr, t, "y", v(1), 0), Err(TxnError::Store(StoreError::NodeDown(_)))));
}

#[test]
fn concurrent_reader_never_sees_uncommitted_write() {
    let (mut store, mut e, mut tr) = setup();
    let older = e.begin(&mut tr, None).unwrap();
    let writer = e.begin(&mut tr, None).unwrap();
    e.write(&mut store, &mut tr, writer, "x", v(99), 0).unwrap();
    // the older one waits, a younger one dies; neither observes 99
    assert_eq!(e.read(&store, &mut tr, older, "x", 1).unwrap(), Access::Queued);
    let younger = e.begin(&mut tr, None).unwrap();
    assert!(matches!(e.read(&store, &mut tr, younger, "x", 2), Err(TxnError::DeadlockVictim(..))));
    e.abort(&mut store, &mut tr, writer).unwrap();
    let grants = e.take_grants();
    assert_eq!(grants.len(), 1);
    assert_eq!(grants[0].tag, 1);
    assert_eq!(e.read(&store, &mut tr, older, "x", 1).unwrap(), Access::Done(v(0)));
}

#[test]
fn moss_rule_examples() {
    let (mut store, mut e, mut tr) = setup();
    let p = e.begin(&mut tr, None).unwrap();
    e.write(&mut store, &mut tr, p, "x", v(1), 0).unwrap();
    let child = e.begin(&mut tr, Some(p)).unwrap();
    assert_eq!(e.acquire(&store, &mut tr, child, "x", LockMode::Write, 0).unwrap(), Access::Done(()));

    let (store2, mut e2, mut tr2) = setup();
    let root = e2.begin(&mut tr2, None).unwrap();
    let s2 = e2.begin(&mut tr2, Some(root)).unwrap();
    let s1 = e2.begin(&mut tr2, Some(root)).unwrap();
    e2.acquire(&store2, &mut tr2, s1, "x", LockMode::Write, 0).unwrap();
    assert_eq!(e2.acquire(&store2, &mut tr2, s2, "x", LockMode::Read, 0).unwrap(), Access::Queued);
}

#[test]
fn nested_commit_anti_inherits_locks() {
    let (mut store, mut e, mut tr) = setup();
    let p = e.begin(&mut tr, None).unwrap();
    let c = e.begin(&mut tr, Some(p)).unwrap();
    e.write(&mut store, &mut tr, c, "x", v(3), 0).unwrap();
    e.commit(&mut store, &mut tr, c).unwrap();
    assert_eq!(e.txn(p).unwrap().locks.get("x"), Some(&LockMode::Write));
    assert_eq!(e.locks().holders("x"), &[(p, LockMode::Write)]);
    assert_eq!(e.txn(p).unwrap().undo_log.len(), 1);
}

#[test]
fn commit_with_active_child_is_refused() {
    let (mut store, mut e, mut tr) = setup();
    let p = e.begin(&mut tr, None).unwrap();
    let _c = e.begin(&mut tr, Some(p)).unwrap();
    assert_eq!(e.commit(&mut store, &mut tr, p).unwrap_err(), TxnError::ChildrenActive(p));
}

#[test]
fn top_level_commit_updates_stable_and_frees_locks() {
    let (mut store, mut e, mut tr) = setup();
    let t = e.begin(&mut tr, None).unwrap();
    for i in 1..=10 {
        e.write(&mut store, &mut tr, t, "x", v(i), 0).unwrap();
    }
    e.write(&mut store, &mut tr, t, "y", v(11), 0).unwrap();
    assert_eq!(store.stable("x").unwrap().value, v(0));
    assert_eq!(e.commit(&mut store, &mut tr, t).unwrap(), Outcome::Committed);
    assert_eq!(store.stable("x").unwrap(), &crate::object_store::Versioned { value: v(10), version: 1 });
    assert_eq!(store.stable("y").unwrap().value, v(11));
    assert!(e.locks().iter().all(|(_, l)| l.holders().is_empty()));
}

#[test]
fn prepare_failure_aborts() {
    let (mut store, mut e, mut tr) = setup();
    let t = e.begin(&mut tr, None).unwrap();
    e.write(&mut store, &mut tr, t, "x", v(1), 0).unwrap();
    e.write(&mut store, &mut tr, t, "y", v(2), 0).unwrap();
    let parts = e.begin_top_commit(&store, t).unwrap();
    assert_eq!(parts, vec![NodeId::new("n1"), NodeId::new("n2")]);
    assert!(e.prepare_at(&mut store, &mut tr, t, &"n1".into()).unwrap());
    store.crash_node(&"n2".into()).unwrap();
    assert!(!e.prepare_at(&mut store, &mut tr, t, &"n2".into()).unwrap());
    e.abort(&mut store, &mut tr, t).unwrap();
    assert_eq!(store.volatile("x").unwrap().value, v(0));
    assert!(!TxnEngine::has_unresolved_prepare(&store, &"n1".into(), t));
}

#[test]
fn coordinator_crash_between_phases_presumes_abort() {
    let (mut store, mut e, mut tr) = setup();
    let t = e.begin_on(&mut tr, None, "n1".into()).unwrap();
    e.write(&mut store, &mut tr, t, "x", v(1), 0).unwrap();
    e.write(&mut store, &mut tr, t, "y", v(2), 0).unwrap();
    let before = store.dump_stable();
    let parts = e.begin_top_commit(&store, t).unwrap();
    for p in &parts {
        assert!(e.prepare_at(&mut store, &mut tr, t, p).unwrap());
    }
    // n2 goes down while prepared, then the coordinator fails before deciding
    store.crash_node(&"n2".into()).unwrap();
    let fx = e.on_crash(&mut store, &mut tr, &"n2".into());
    assert!(fx.aborted_roots.is_empty(), "prepared participant keeps the tree alive");
    store.crash_node(&"n1".into()).unwrap();
    let fx = e.on_crash(&mut store, &mut tr, &"n1".into());
    assert_eq!(fx.aborted_roots, vec![t]);
    store.recover_node(&"n1".into()).unwrap();
    e.on_recover(&store, &mut tr, &"n1".into());
    store.recover_node(&"n2".into()).unwrap();
    let rx = e.on_recover(&store, &mut tr, &"n2".into());
    assert_eq!(rx.in_doubt, vec![(t, NodeId::new("n1"))]);
    assert_eq!(e.answer_inquiry(&store, &"n1".into(), t), InquiryAnswer::Abort);
    e.resolve_abort_at(&mut store, &mut tr, t, &"n2".into()).unwrap();
    assert_eq!(store.dump_stable(), before);
    assert!(e.locks().holders("y").is_empty());
}

#[test]
fn decided_commit_completes_after_participant_recovery() {
    let (mut store, mut e, mut tr) = setup();
    let t = e.begin_on(&mut tr, None, "n1".into()).unwrap();
    e.write(&mut store, &mut tr, t, "x", v(1), 0).unwrap();
    e.write(&mut store, &mut tr, t, "y", v(2), 0).unwrap();
    let parts = e.begin_top_commit(&store, t).unwrap();
    for p in &parts {
        e.prepare_at(&mut store, &mut tr, t, p).unwrap();
    }
    e.decide_commit(&mut store, &mut tr, t).unwrap();
    e.apply_at(&mut store, &mut tr, t, &"n1".into()).unwrap();
    store.crash_node(&"n2".into()).unwrap();
    e.on_crash(&mut store, &mut tr, &"n2".into());
    assert!(!e.apply_at(&mut store, &mut tr, t, &"n2".into()).unwrap());
    store.recover_node(&"n2".into()).unwrap();
    let rx = e.on_recover(&store, &mut tr, &"n2".into());
    assert_eq!(rx.in_doubt.len(), 1);
    assert_eq!(e.answer_inquiry(&store, &"n1".into(), t), InquiryAnswer::Commit);
    assert!(e.apply_at(&mut store, &mut tr, t, &"n2".into()).unwrap());
    assert!(e.apply_at(&mut store, &mut tr, t, &"n2".into()).unwrap());
    assert_eq!(store.stable("y").unwrap().value, v(2));
    assert_eq!(store.stable("y").unwrap().version, 1);
}

#[test]
fn child_abort_restores_and_leaves_parent_active() {
    let (mut store, mut e, mut tr) = setup();
    let p = e.begin(&mut tr, None).unwrap();
    let c = e.begin(&mut tr, Some(p)).unwrap();
    e.write(&mut store, &mut tr, c, "x", v(42), 0).unwrap();
    e.abort(&mut store, &mut tr, c).unwrap();
    assert_eq!(store.volatile("x").unwrap().value, v(0));
    assert_eq!(e.status(p).unwrap(), TxnStatus::Active);
    assert_eq!(e.abort(&mut store, &mut tr, c).unwrap_err(), TxnError::TxnTerminal(c));
}

#[test]
fn abort_of_committed_is_terminal() {
    let (mut store, mut e, mut tr) = setup();
    let t = e.begin(&mut tr, None).unwrap();
    e.commit(&mut store, &mut tr, t).unwrap();
    assert_eq!(e.abort(&mut store, &mut tr, t).unwrap_err(), TxnError::TxnTerminal(t));
}

#[test]
fn three_level_subtree_abort_matches_never_applied_oracle() {
    let (mut store, mut e, mut tr) = setup();
    let root = e.begin(&mut tr, None).unwrap();
    e.write(&mut store, &mut tr, root, "z", v(-1), 0).unwrap();
    let a = e.begin(&mut tr, Some(root)).unwrap();
    e.write(&mut store, &mut tr, a, "x", v(1), 0).unwrap();
    let b = e.begin(&mut tr, Some(a)).unwrap();
    e.write(&mut store, &mut tr, b, "y", v(2), 0).unwrap();
    let c = e.begin(&mut tr, Some(b)).unwrap();
    e.write(&mut store, &mut tr, c, "x", v(3), 0).unwrap();
    e.commit(&mut store, &mut tr, c).unwrap();
    e.write(&mut store, &mut tr, b, "x", v(4), 0).unwrap();
    e.write(&mut store, &mut tr, a, "y", v(5), 1).unwrap_or(Access::Queued);
    e.abort(&mut store, &mut tr, a).unwrap();
    // oracle: only the root's own write survives
    assert_eq!(store.volatile("x").unwrap().value, v(0));
    assert_eq!(store.volatile("y").unwrap().value, v(10));
    assert_eq!(store.volatile("z").unwrap().value, v(-1));
    assert_eq!(e.status(b).unwrap(), TxnStatus::Aborted);
    assert_eq!(e.status(root).unwrap(), TxnStatus::Active);
}

#[test]
fn region_rollback_is_partial() {
    let (mut store, mut e, mut tr) = setup();
    let t = e.begin(&mut tr, None).unwrap();
    e.write_tagged(&mut store, &mut tr, t, "x", v(1), 1, 0, &Detail::new()).unwrap();
    e.write_tagged(&mut store, &mut tr, t, "y", v(2), 2, 0, &Detail::new()).unwrap();
    e.rollback_regions(&mut store, &mut tr, t, &BTreeSet::from([2])).unwrap();
    assert_eq!(store.volatile("y").unwrap().value, v(10));
    assert_eq!(store.volatile("x").unwrap().value, v(1));
    e.commit(&mut store, &mut tr, t).unwrap();
    assert_eq!(store.stable("y").unwrap().version, 0);
    assert_eq!(store.stable("x").unwrap().version, 1);
}

#[test]
fn uncommitted_write_lost_on_crash() {
    let (mut store, mut e, mut tr) = setup();
    let t = e.begin(&mut tr, None).unwrap();
    e.write(&mut store, &mut tr, t, "x", v(4), 0).unwrap();
    e.commit(&mut store, &mut tr, t).unwrap();
    let t2 = e.begin(&mut tr, None).unwrap();
    e.write(&mut store, &mut tr, t2, "x", v(8), 0).unwrap();
    store.crash_node(&"n1".into()).unwrap();
    let fx = e.on_crash(&mut store, &mut tr, &"n1".into());
    assert_eq!(fx.aborted_roots, vec![t2]);
    store.recover_node(&"n1".into()).unwrap();
    e.on_recover(&store, &mut tr, &"n1".into());
    let t3 = e.begin(&mut tr, None).unwrap();
    assert_eq!(e.read(&store, &mut tr, t3, "x", 0).unwrap(), Access::Done(v(4)));
}

#[test]
fn early_release_mutant_leaks_uncommitted_values() {
    let (mut store, _, mut tr) = setup();
    let mut e = TxnEngine::with_policy(LockPolicy::EarlyRelease);
    let w = e.begin(&mut tr, None).unwrap();
    e.write(&mut store, &mut tr, w, "x", v(77), 0).unwrap();
    let r = e.begin(&mut tr, None).unwrap();
    assert_eq!(e.read(&store, &mut tr, r, "x", 0).unwrap(), Access::Done(v(77)));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    #[derive(Debug, Clone)]
    enum Op {
        Begin,
        Write(usize, i64),
        Commit,
        Abort,
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            Just(Op::Begin),
            (0usize..3, -9i64..9).prop_map(|(o, v)| Op::Write(o, v)),
            Just(Op::Commit),
            Just(Op::Abort),
        ]
    }

    proptest! {
        // single chain of nesting: only one line of descent is ever active,
        // so every write is granted and the oracle is a stack of state maps
        #[test]
        fn undo_matches_state_stack_oracle(ops in proptest::collection::vec(op(), 1..60)) {
            let (mut store, mut e, mut tr) = setup();
            let objs = ["x", "y", "z"];
            let mut chain: Vec<TransactionId> = Vec::new();
            let mut states: Vec<BTreeMap<&str, Value>> =
                vec![objs.iter().map(|o| (*o, store.volatile(o).unwrap().value.clone())).collect()];
            for o in ops {
                match o {
                    Op::Begin => {
                        let t = e.begin(&mut tr, chain.last().copied()).unwrap();
                        chain.push(t);
                        states.push(states.last().unwrap().clone());
                    }
                    Op::Write(obj, val) if !chain.is_empty() => {
                        let t = *chain.last().unwrap();
                        e.write(&mut store, &mut tr, t, objs[obj], v(val), 0).unwrap();
                        states.last_mut().unwrap().insert(objs[obj], v(val));
                    }
                    Op::Commit if chain.len() > 1 => {
                        let t = chain.pop().unwrap();
                        e.commit(&mut store, &mut tr, t).unwrap();
                        let top = states.pop().unwrap();
                        *states.last_mut().unwrap() = top;
                    }
                    Op::Abort if !chain.is_empty() => {
                        let t = chain.pop().unwrap();
                        e.abort(&mut store, &mut tr, t).unwrap();
                        states.pop();
                    }
                    _ => {}
                }
                for o in objs {
                    prop_assert_eq!(&store.volatile(o).unwrap().value, &states.last().unwrap()[o]);
                }
            }
        }
    }
}
