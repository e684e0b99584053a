//! Post-hoc classification of thread pairs by kind of concurrency.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::trace::{Event, Kind};
use crate::txn_engine::serializability::{is_operation, MalformedTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Concurrency {
    Independent,
    Competitive,
    Cooperative,
}

impl fmt::Display for Concurrency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Concurrency::Independent => "independent",
            Concurrency::Competitive => "competitive",
            Concurrency::Cooperative => "cooperative",
        })
    }
}

/// Labels every pair of threads seen in the trace. Co-participants of some
/// instance cooperate; otherwise a shared object makes them competitive.
pub fn classify_concurrency(events: &[Event]) -> Result<BTreeMap<(u64, u64), Concurrency>, MalformedTrace> {
    let mut objects: BTreeMap<u64, BTreeSet<&str>> = BTreeMap::new();
    let mut members: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
    for e in events {
        match e.kind {
            Kind::Register if !e.detail.has("rejected") => {
                let thr = e.thread().ok_or_else(|| bad(e, "register without thread"))?;
                let inst = e.inst().ok_or_else(|| bad(e, "register without instance"))?;
                members.entry(inst).or_default().insert(thr);
                objects.entry(thr).or_default();
            }
            Kind::Submit => {
                if let Some(thr) = e.thread() {
                    objects.entry(thr).or_default();
                }
            }
            _ if is_operation(e) => {
                if let Some(thr) = e.thread() {
                    let obj = e.obj.as_deref().ok_or_else(|| bad(e, "operation without object"))?;
                    objects.entry(thr).or_default().insert(obj);
                }
            }
            _ => {}
        }
    }
    let mut coop = BTreeSet::new();
    for m in members.values() {
        for a in m {
            for b in m.range(a + 1..) {
                coop.insert((*a, *b));
            }
        }
    }
    let threads: Vec<u64> = objects.keys().copied().collect();
    let mut out = BTreeMap::new();
    for (i, a) in threads.iter().enumerate() {
        for b in &threads[i + 1..] {
            let kind = if coop.contains(&(*a, *b)) {
                Concurrency::Cooperative
            } else if !objects[a].is_disjoint(&objects[b]) {
                Concurrency::Competitive
            } else {
                Concurrency::Independent
            };
            out.insert((*a, *b), kind);
        }
    }
    Ok(out)
}

fn bad(e: &Event, msg: &str) -> MalformedTrace {
    MalformedTrace { seq: e.seq, msg: msg.to_owned() }
}
