//! Run summaries: outcome counts, audit verdicts and live check results.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::audit::{audit_trace, AuditSuite};
use crate::object_store::{parse_dump_line, DumpEntry};
use crate::sim::{LiveChecks, RunResult};
use crate::trace::{Event, Kind};
use crate::txn_engine::{MalformedTrace, SerializabilityVerdict};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceOutcome {
    pub inst: u64,
    pub action: String,
    pub nested: bool,
    /// `committed`, `aborted`, or `None` if the run ended first.
    pub result: Option<String>,
    pub cause: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub events: usize,
    pub crashes: usize,
    pub instances: Vec<InstanceOutcome>,
    pub audits: AuditSuite,
    pub live: Option<LiveChecks>,
}

impl Report {
    pub fn from_events(events: &[Event], dump: &[DumpEntry]) -> Result<Self, MalformedTrace> {
        let audits = audit_trace(events, dump)?;
        let mut insts: BTreeMap<u64, InstanceOutcome> = BTreeMap::new();
        for e in events {
            match e.kind {
                Kind::Register => {
                    let Some(i) = e.inst() else { continue };
                    insts.entry(i).or_insert_with(|| InstanceOutcome {
                        inst: i,
                        action: e.detail.get("action").unwrap_or("").to_owned(),
                        nested: e.detail.has("parent"),
                        result: None,
                        cause: None,
                    });
                }
                Kind::Outcome => {
                    if let Some(o) = e.inst().and_then(|i| insts.get_mut(&i)) {
                        o.result = e.detail.get("result").map(str::to_owned);
                        o.cause = e.detail.get("cause").map(str::to_owned);
                    }
                }
                _ => {}
            }
        }
        Ok(Report {
            events: events.len(),
            crashes: events.iter().filter(|e| e.kind == Kind::Crash).count(),
            instances: insts.into_values().collect(),
            audits,
            live: None,
        })
    }

    pub fn from_run(run: &RunResult) -> Result<Self, MalformedTrace> {
        let dump: Vec<DumpEntry> = run.dump.lines().filter_map(parse_dump_line).collect();
        let mut r = Report::from_events(run.trace.events(), &dump)?;
        r.live = Some(run.live.clone());
        Ok(r)
    }

    fn count(&self, result: Option<&str>) -> usize {
        self.instances.iter().filter(|i| !i.nested && i.result.as_deref() == result).count()
    }

    /// Top-level instances that committed.
    pub fn committed(&self) -> usize {
        self.count(Some("committed"))
    }

    pub fn aborted(&self) -> usize {
        self.count(Some("aborted"))
    }

    pub fn unfinished(&self) -> usize {
        self.count(None)
    }

    pub fn passed(&self) -> bool {
        self.audits.passed() && self.live.as_ref().is_none_or(LiveChecks::passed)
    }

    /// Every violation message, prefixed with the check that raised it.
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let SerializabilityVerdict::Cyclic(c) = &self.audits.serializability {
            let c: Vec<String> = c.iter().map(|t| t.to_string()).collect();
            out.push(format!("serializability: cycle {}", c.join(" -> ")));
        }
        for (name, vs) in self.audits.scans() {
            for v in vs {
                out.push(format!("{name}: {v}"));
            }
        }
        if let Some(l) = &self.live {
            for f in &l.failures {
                out.push(format!("live: {f}"));
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "events {}  committed {}  aborted {}  unfinished {}  crashes {}",
            self.events,
            self.committed(),
            self.aborted(),
            self.unfinished(),
            self.crashes
        );
        for i in &self.instances {
            let indent = if i.nested { "  " } else { "" };
            let result = i.result.as_deref().unwrap_or("unfinished");
            let cause = i.cause.as_deref().map(|c| format!(" ({c})")).unwrap_or_default();
            let _ = writeln!(s, "{indent}instance {} {}: {result}{cause}", i.inst, i.action);
        }
        let ser = match &self.audits.serializability {
            SerializabilityVerdict::Serializable(_) => "ok".to_owned(),
            SerializabilityVerdict::Cyclic(_) => "FAIL".to_owned(),
        };
        let _ = writeln!(s, "audit serializability: {ser}");
        for (name, vs) in self.audits.scans() {
            let v = if vs.is_empty() { "ok".to_owned() } else { format!("FAIL ({})", vs.len()) };
            let _ = writeln!(s, "audit {name}: {v}");
        }
        if let Some(l) = &self.live {
            let v = if l.passed() { "ok".to_owned() } else { format!("FAIL ({})", l.failures.len()) };
            let _ = writeln!(s, "live checks ({} crashes, {} aborts): {v}", l.crashes, l.aborts);
        }
        for f in self.failures() {
            let _ = writeln!(s, "  {f}");
        }
        s
    }
}

/// Objects whose values differ between two dumps, ignoring versions.
pub fn dump_value_diff(a: &str, b: &str) -> BTreeSet<String> {
    let index = |d: &str| -> BTreeMap<String, String> {
        d.lines().filter_map(parse_dump_line).map(|e| (e.object, e.value.to_hex())).collect()
    };
    let (a, b) = (index(a), index(b));
    a.keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .cloned()
        .collect()
}
